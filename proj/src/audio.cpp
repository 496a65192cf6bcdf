// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/audio.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numbers>

#include "msmk/errors.hpp"
#include "msmk/random.hpp"

namespace msmk {

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw ParseError(where + "not a RIFF/WAVE file");
  }

  int format = -1, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = read_u32(chunk + 4);
    if (pos + 8 + len > bytes.size()) throw ParseError(where + "truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw ParseError(where + "short fmt chunk");
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      if (format == 0xFFFE) {  // WAVE_FORMAT_EXTENSIBLE: sub-format GUID starts with the format tag
        if (len < 26) throw ParseError(where + "short extensible fmt chunk");
        format = read_u16(chunk + 8 + 24);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (format < 0 || data == nullptr) throw ParseError(where + "missing fmt or data chunk");
  if (channels < 1) throw ParseError(where + "zero channels");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) {
    throw ParseError(where + "unsupported encoding (format " + std::to_string(format) + ", " +
                     std::to_string(bits) + " bits)");
  }
  if (rate != 16000) {
    throw UnsupportedRateError(where + "sample rate " + std::to_string(rate) + " Hz, expected 16000");
  }

  const std::size_t width = static_cast<std::size_t>(bits / 8);
  const std::size_t frames = data_len / (width * static_cast<std::size_t>(channels));
  AudioClip clip;
  clip.sample_rate = 16000;
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)) * width;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        float v;
        std::uint32_t raw = read_u32(p);
        std::memcpy(&v, &raw, 4);
        acc += v;
      }
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  return clip;
}

void save_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::string out;
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (float s : clip.samples) {
    const double scaled = std::clamp(static_cast<double>(s), -1.0, 32767.0 / 32768.0) * 32768.0;
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(scaled))));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix<float> mel_filterbank(const FrontendConfig& cfg) {
  const int bins = cfg.n_fft / 2 + 1;
  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels + 2));
  for (int i = 0; i < cfg.n_mels + 2; ++i) edges[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1));

  Matrix<float> fb = Matrix<float>::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      double w = 0;
      if (f > left && f < center) {
        w = (f - left) / (center - left);
      } else if (f >= center && f < right) {
        w = (right - f) / (right - center);
      }
      fb(m, k) = static_cast<float>(w);
    }
  }
  return fb;
}

Eigen::Index frame_count(std::size_t num_samples, const FrontendConfig& cfg, bool padded) {
  std::size_t n = num_samples;
  if (padded && cfg.centered) n += 2 * static_cast<std::size_t>((cfg.win - cfg.hop) / 2);
  if (n < static_cast<std::size_t>(cfg.win)) return 0;
  return static_cast<Eigen::Index>((n - static_cast<std::size_t>(cfg.win)) / static_cast<std::size_t>(cfg.hop) + 1);
}

Spectrogram log_mel(const AudioClip& clip, const FrontendConfig& cfg) {
  if (clip.sample_rate != cfg.sample_rate) {
    throw UnsupportedRateError("log_mel: clip is " + std::to_string(clip.sample_rate) + " Hz, expected " +
                               std::to_string(cfg.sample_rate));
  }
  const std::size_t n = clip.samples.size();
  if (n < static_cast<std::size_t>(cfg.win)) {
    throw LengthError("log_mel: clip has " + std::to_string(n) + " samples, need at least one window of " +
                      std::to_string(cfg.win));
  }

  // Reflect padding (mirror without repeating the edge sample).
  const std::size_t pad = cfg.centered ? static_cast<std::size_t>((cfg.win - cfg.hop) / 2) : 0;
  std::vector<double> x(n + 2 * pad);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(pad);
    std::ptrdiff_t j = src;
    if (j < 0) j = -j;
    if (j >= static_cast<std::ptrdiff_t>(n)) j = 2 * static_cast<std::ptrdiff_t>(n) - 2 - j;
    x[i] = clip.samples[static_cast<std::size_t>(j)];
  }

  const Eigen::Index frames = frame_count(n, cfg, true);
  const int bins = cfg.n_fft / 2 + 1;
  std::vector<double> window(static_cast<std::size_t>(cfg.win));
  for (int i = 0; i < cfg.win; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / cfg.win);
  const Eigen::MatrixXd fb = mel_filterbank(cfg).cast<double>();

  Eigen::FFT<double> fft;
  std::vector<double> buf(static_cast<std::size_t>(cfg.n_fft));
  std::vector<std::complex<double>> spec;
  Eigen::VectorXd power(bins);
  Spectrogram out;
  out.hop_s = static_cast<double>(cfg.hop) / cfg.sample_rate;
  out.frames.resize(frames, cfg.n_mels);
  for (Eigen::Index t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(cfg.hop);
    for (int i = 0; i < cfg.win; ++i) buf[i] = x[start + static_cast<std::size_t>(i)] * window[i];
    fft.fwd(spec, buf);
    for (int k = 0; k < bins; ++k) power(k) = std::norm(spec[static_cast<std::size_t>(k)]);
    const Eigen::VectorXd mel = fb * power;
    for (int m = 0; m < cfg.n_mels; ++m) {
      out.frames(t, m) = static_cast<float>(std::log(std::max(mel(m), cfg.power_floor)));
    }
  }
  return out;
}

Spectrogram random_crop(const Spectrogram& spec, double duration_s, std::uint64_t seed, float pad_value) {
  const auto target = static_cast<Eigen::Index>(std::lround(duration_s / spec.hop_s));
  Spectrogram out;
  out.hop_s = spec.hop_s;
  const Eigen::Index T = spec.num_frames();
  if (T <= target) {
    out.frames = Matrix<float>::Constant(target, spec.n_mels(), pad_value);
    out.frames.topRows(T) = spec.frames;
    return out;
  }
  Rng rng(seed);
  const auto start = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(T - target + 1)));
  out.frames = spec.frames.middleRows(start, target);
  return out;
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "tones") return SynthKind::Tones;
  if (name == "chirps") return SynthKind::Chirps;
  if (name == "noise-bands") return SynthKind::NoiseBands;
  throw ContractError("unknown synthetic kind '" + name + "' (expected tones, chirps or noise-bands)");
}

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::Tones: return "tones";
    case SynthKind::Chirps: return "chirps";
    case SynthKind::NoiseBands: return "noise-bands";
  }
  return "?";
}

namespace {

/// Center frequency (Hz) of a fractional mel-filter index.
double filter_center_hz(double index, const FrontendConfig& cfg) {
  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  return mel_to_hz(lo + (hi - lo) * (index + 1.0) / (cfg.n_mels + 1));
}

}  // namespace

AudioClip synth_clip(SynthKind kind, int label, std::uint64_t seed, std::size_t index, const SynthOptions& opts) {
  const FrontendConfig& fe = opts.frontend;
  Rng rng = Rng(seed).split(index).split(1);
  const double band = static_cast<double>(fe.n_mels) / opts.num_classes;
  // A frequency well inside band k (middle half), in Hz.
  auto freq_in_band = [&](int k) {
    return filter_center_hz(band * k + band * rng.uniform(0.25, 0.75), fe);
  };

  const auto n = static_cast<std::size_t>(std::lround(opts.duration_s * fe.sample_rate));
  AudioClip clip;
  clip.sample_rate = fe.sample_rate;
  clip.samples.assign(n, 0.0f);
  const double amp = rng.uniform(0.3, 0.6);
  const double two_pi = 2.0 * std::numbers::pi;

  switch (kind) {
    case SynthKind::Tones: {
      const double f = freq_in_band(label);
      const double phase = rng.uniform(0, two_pi);
      for (std::size_t i = 0; i < n; ++i) {
        clip.samples[i] = static_cast<float>(amp * std::sin(two_pi * f * i / fe.sample_rate + phase));
      }
      break;
    }
    case SynthKind::Chirps: {
      const double f0 = freq_in_band(label);
      const double f1 = freq_in_band(opts.num_classes - 1 - label);
      const double dur = opts.duration_s;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / fe.sample_rate;
        const double ph = two_pi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
        clip.samples[i] = static_cast<float>(amp * std::sin(ph));
      }
      break;
    }
    case SynthKind::NoiseBands: {
      constexpr int kPartials = 32;
      std::vector<double> f(kPartials), ph(kPartials);
      for (int p = 0; p < kPartials; ++p) {
        f[p] = filter_center_hz(band * label + band * rng.uniform(0.2, 0.8), fe);
        ph[p] = rng.uniform(0, two_pi);
      }
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (int p = 0; p < kPartials; ++p) s += std::sin(two_pi * f[p] * i / fe.sample_rate + ph[p]);
        clip.samples[i] = static_cast<float>(amp * s / std::sqrt(double(kPartials)));
      }
      break;
    }
  }
  // Low broadband noise floor.
  for (auto& s : clip.samples) s += static_cast<float>(1e-3 * rng.normal());
  return clip;
}

std::vector<LabeledSpectrogram> synth_dataset(SynthKind kind, std::size_t count, std::uint64_t seed,
                                              const SynthOptions& opts) {
  if (opts.num_classes < 1) throw ContractError("synth_dataset: num_classes must be positive");
  std::vector<LabeledSpectrogram> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng label_rng = Rng(seed).split(i);
    const int label = static_cast<int>(label_rng.below(static_cast<std::uint64_t>(opts.num_classes)));
    out.push_back({log_mel(synth_clip(kind, label, seed, i, opts), opts.frontend), label});
  }
  return out;
}

}  // namespace msmk
