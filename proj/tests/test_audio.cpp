// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "msmk/audio.hpp"
#include "msmk/errors.hpp"

using namespace msmk;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "msmk_test_audio";
  fs::create_directories(dir);
  return dir / name;
}

void put32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
void put16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char(v >> 8));
}

/// Hand-assembled WAV so the reader is not tested against our own writer.
void write_raw_wav(const fs::path& p, int format, int channels, int rate, int bits, const std::string& payload) {
  std::string s = "RIFF";
  put32(s, static_cast<std::uint32_t>(36 + payload.size()));
  s += "WAVEfmt ";
  put32(s, 16);
  put16(s, static_cast<std::uint16_t>(format));
  put16(s, static_cast<std::uint16_t>(channels));
  put32(s, static_cast<std::uint32_t>(rate));
  put32(s, static_cast<std::uint32_t>(rate * channels * bits / 8));
  put16(s, static_cast<std::uint16_t>(channels * bits / 8));
  put16(s, static_cast<std::uint16_t>(bits));
  s += "data";
  put32(s, static_cast<std::uint32_t>(payload.size()));
  s += payload;
  std::ofstream(p, std::ios::binary).write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string pcm16(std::initializer_list<int> values) {
  std::string s;
  for (int v : values) put16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  return s;
}

AudioClip tone(double hz, double seconds, double amp = 0.5) {
  AudioClip c;
  c.samples.resize(static_cast<std::size_t>(seconds * 16000));
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    c.samples[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * i / 16000.0));
  }
  return c;
}

}  // namespace

TEST_CASE("load_wav") {
  SUBCASE("16-bit zeros") {
    auto p = temp_path("zeros.wav");
    write_raw_wav(p, 1, 1, 16000, 16, pcm16({0, 0, 0, 0}));
    auto clip = load_wav(p);
    REQUIRE(clip.samples.size() == 4);
    for (float s : clip.samples) CHECK(s == 0.0f);
  }
  SUBCASE("16384 scales to 0.5") {
    auto p = temp_path("half.wav");
    write_raw_wav(p, 1, 1, 16000, 16, pcm16({16384, -16384}));
    auto clip = load_wav(p);
    CHECK(clip.samples[0] == 0.5f);
    CHECK(clip.samples[1] == -0.5f);
  }
  SUBCASE("one second yields 16000 samples") {
    auto p = temp_path("one_second.wav");
    save_wav(p, tone(440, 1.0));
    CHECK(load_wav(p).samples.size() == 16000);
  }
  SUBCASE("stereo is averaged") {
    auto p = temp_path("stereo.wav");
    write_raw_wav(p, 1, 2, 16000, 16, pcm16({16384, 0, -8192, -8192}));
    auto clip = load_wav(p);
    REQUIRE(clip.samples.size() == 2);
    CHECK(clip.samples[0] == 0.25f);
    CHECK(clip.samples[1] == -0.25f);
  }
  SUBCASE("float32") {
    auto p = temp_path("float.wav");
    std::string payload(8, '\0');
    const float vals[2] = {0.75f, -0.125f};
    std::memcpy(payload.data(), vals, 8);
    write_raw_wav(p, 3, 1, 16000, 32, payload);
    auto clip = load_wav(p);
    CHECK(clip.samples[0] == 0.75f);
    CHECK(clip.samples[1] == -0.125f);
  }
  SUBCASE("other sample rates are rejected") {
    auto p = temp_path("44k.wav");
    write_raw_wav(p, 1, 1, 44100, 16, pcm16({1, 2}));
    CHECK_THROWS_AS(load_wav(p), UnsupportedRateError);
  }
  SUBCASE("malformed header") {
    auto p = temp_path("junk.wav");
    std::ofstream(p) << "definitely not audio";
    CHECK_THROWS_AS(load_wav(p), ParseError);
    write_raw_wav(p, 1, 1, 16000, 8, "ab");
    CHECK_THROWS_AS(load_wav(p), ParseError);
  }
}

TEST_CASE("framing arithmetic") {
  CHECK(frame_count(32000, {}, false) == 198);
  CHECK(frame_count(32000, {}, true) == 200);
  CHECK(frame_count(160000, {}, true) == 1000);
  auto spec = log_mel(tone(440, 2.0));
  CHECK(spec.num_frames() == 200);
  CHECK(spec.n_mels() == 80);
  CHECK(spec.hop_s == doctest::Approx(0.01));
}

TEST_CASE("log_mel edge cases") {
  SUBCASE("silence is the log floor everywhere") {
    AudioClip silent;
    silent.samples.assign(8000, 0.0f);
    auto spec = log_mel(silent);
    CHECK((spec.frames.array() == log_floor()).all());
  }
  SUBCASE("too short") {
    AudioClip c;
    c.samples.assign(399, 0.1f);
    CHECK_THROWS_AS(log_mel(c), LengthError);
  }
  SUBCASE("deterministic to the bit") {
    auto c = tone(733, 0.5);
    auto a = log_mel(c), b = log_mel(c);
    CHECK(std::memcmp(a.frames.data(), b.frames.data(), sizeof(float) * a.frames.size()) == 0);
  }
}

TEST_CASE("interior frame matches a naive DFT oracle") {
  const auto clip = tone(1000, 1.0);
  const auto spec = log_mel(clip);
  // Oracle: direct DFT of frame 50, independently built HTK triangles.
  const int t = 50, start = t * 160 - 120;
  std::vector<double> power(257);
  for (int k = 0; k < 257; ++k) {
    double re = 0, im = 0;
    for (int n = 0; n < 400; ++n) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / 400);
      const double x = w * clip.samples[start + n];
      re += x * std::cos(2 * std::numbers::pi * k * n / 512);
      im -= x * std::sin(2 * std::numbers::pi * k * n / 512);
    }
    power[k] = re * re + im * im;
  }
  const double top = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  auto edge = [&](int i) { return 700.0 * (std::pow(10.0, top * i / 81.0 / 2595.0) - 1.0); };
  for (int m = 0; m < 80; ++m) {
    double e = 0;
    for (int k = 0; k < 257; ++k) {
      const double f = k * 31.25;
      const double w = std::max(0.0, std::min((f - edge(m)) / (edge(m + 1) - edge(m)),
                                              (edge(m + 2) - f) / (edge(m + 2) - edge(m + 1))));
      e += w * power[k];
    }
    CAPTURE(m);
    CHECK(spec.frames(t, m) == doctest::Approx(std::log(std::max(e, 1e-10))).epsilon(1e-4));
  }

  // 1 kHz lies inside filters 27 and 28 only; away from the reflected edges
  // the peak stays put.
  Eigen::Index first;
  spec.frames.row(t).maxCoeff(&first);
  CHECK((first == 27 || first == 28));
  for (Eigen::Index r = 1; r + 1 < spec.num_frames(); ++r) {
    Eigen::Index arg;
    spec.frames.row(r).maxCoeff(&arg);
    CHECK(arg == first);
  }
}

TEST_CASE("mel filterbank coverage") {
  const auto fb = mel_filterbank();
  CHECK(fb.rows() == 80);
  CHECK(fb.cols() == 257);
  CHECK((fb.array() >= 0).all());
  const double first_center = mel_to_hz(hz_to_mel(8000.0) / 81.0);
  const double last_center = mel_to_hz(hz_to_mel(8000.0) * 80.0 / 81.0);
  for (int k = 0; k < 257; ++k) {
    const double f = k * 16000.0 / 512;
    if (f < first_center || f > last_center) continue;
    CAPTURE(k);
    CHECK(fb.col(k).maxCoeff() > 0.0f);
  }
}

TEST_CASE("energy monotonicity") {
  auto quiet = tone(1500, 0.5, 0.1);
  AudioClip loud = quiet;
  for (auto& s : loud.samples) s *= 3.0f;
  auto a = log_mel(quiet), b = log_mel(loud);
  const float floor = log_floor();
  for (Eigen::Index i = 0; i < a.frames.size(); ++i) {
    if (a.frames.data()[i] > floor) CHECK(b.frames.data()[i] > a.frames.data()[i]);
  }
}

TEST_CASE("random_crop") {
  auto ten = log_mel(tone(500, 10.0));
  REQUIRE(ten.num_frames() == 1000);
  auto crop = random_crop(ten, 2.0, 5);
  CHECK(crop.num_frames() == 200);
  CHECK(crop.frames == random_crop(ten, 2.0, 5).frames);
  bool found = false;
  for (Eigen::Index s = 0; s + 200 <= 1000 && !found; ++s) found = ten.frames.middleRows(s, 200) == crop.frames;
  CHECK(found);

  auto two = log_mel(tone(500, 2.0));
  CHECK(random_crop(two, 2.0, 9).frames == two.frames);

  auto one = log_mel(tone(500, 1.0));
  auto padded = random_crop(one, 2.0, 1);
  CHECK(padded.num_frames() == 200);
  CHECK(padded.frames.topRows(100) == one.frames);
  CHECK((padded.frames.bottomRows(100).array() == log_floor()).all());
}

TEST_CASE("synth_dataset") {
  CHECK(synth_dataset(SynthKind::Tones, 0, 1).empty());

  SynthOptions opts;
  opts.duration_s = 0.5;
  auto a = synth_dataset(SynthKind::Chirps, 4, 77, opts);
  auto b = synth_dataset(SynthKind::Chirps, 4, 77, opts);
  for (int i = 0; i < 4; ++i) {
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].spec.frames == b[i].spec.frames);
  }

  for (auto kind : {SynthKind::Tones, SynthKind::NoiseBands}) {
    auto ds = synth_dataset(kind, 12, 3, opts);
    for (const auto& item : ds) {
      Eigen::Index arg;
      item.spec.frames.cast<double>().colwise().mean().maxCoeff(&arg);
      CAPTURE(to_string(kind));
      CHECK(arg / 20 == item.label);  // 80 mel bins in 4 bands of 20
    }
  }
  CHECK_THROWS_AS(parse_synth_kind("speech"), ContractError);
}
