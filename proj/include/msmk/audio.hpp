// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msmk/tensor.hpp"

namespace msmk {

/// Mono PCM in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 16000;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Log-mel energies, one row per frame.
struct Spectrogram {
  Matrix<float> frames;  // T x F
  double hop_s = 0.01;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index n_mels() const { return frames.cols(); }
  double duration_s() const { return static_cast<double>(frames.rows()) * hop_s; }
};

struct FrontendConfig {
  int sample_rate = 16000;
  int win = 400;  // 25 ms
  int hop = 160;  // 10 ms
  int n_fft = 512;
  int n_mels = 80;
  double f_min = 0.0;
  double f_max = 8000.0;
  double power_floor = 1e-10;
  /// Reflect-pad (win - hop) / 2 samples on each side so that a clip of n
  /// samples yields floor(n / hop) frames.
  bool centered = true;
};

/// log(power_floor); the value of silent frames and of crop padding.
inline float log_floor(const FrontendConfig& cfg = {}) { return static_cast<float>(std::log(cfg.power_floor)); }

/// Reads RIFF/WAVE (PCM16 or float32, any channel count, downmixed by
/// averaging). Throws ParseError on malformed input and UnsupportedRateError
/// unless the file is 16 kHz; there is no resampler.
AudioClip load_wav(const std::filesystem::path& path);

/// Writes 16-bit PCM mono.
void save_wav(const std::filesystem::path& path, const AudioClip& clip);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular HTK-mel filters, n_mels x (n_fft/2 + 1), without area normalization.
Matrix<float> mel_filterbank(const FrontendConfig& cfg = {});

/// Frames produced for `num_samples` samples, with or without centered padding.
Eigen::Index frame_count(std::size_t num_samples, const FrontendConfig& cfg = {}, bool padded = true);

/// Hann-windowed STFT power projected onto the mel filterbank, natural log with
/// a floor. Throws LengthError for clips shorter than one window.
Spectrogram log_mel(const AudioClip& clip, const FrontendConfig& cfg = {});

/// Contiguous slice of duration_s, uniformly placed; shorter inputs are
/// right-padded with `pad_value` frames.
Spectrogram random_crop(const Spectrogram& spec, double duration_s, std::uint64_t seed,
                        float pad_value = log_floor());

enum class SynthKind { Tones, Chirps, NoiseBands };

SynthKind parse_synth_kind(const std::string& name);
std::string to_string(SynthKind kind);

struct SynthOptions {
  int num_classes = 4;
  double duration_s = 2.0;
  FrontendConfig frontend{};
};

struct LabeledSpectrogram {
  Spectrogram spec;
  int label = 0;
};

/// Synthesized audio for class k occupies the k-th of num_classes equal slices
/// of the mel axis (tones, band-limited noise) or sweeps from slice k to slice
/// num_classes-1-k (chirps). Deterministic per seed.
std::vector<LabeledSpectrogram> synth_dataset(SynthKind kind, std::size_t count, std::uint64_t seed,
                                              const SynthOptions& opts = {});

/// The audio behind synth_dataset entry `index`; exposed for the WAV pipeline tests.
AudioClip synth_clip(SynthKind kind, int label, std::uint64_t seed, std::size_t index,
                     const SynthOptions& opts = {});

}  // namespace msmk
