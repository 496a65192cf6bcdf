// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmk/audio.hpp"
#include "msmk/errors.hpp"
#include "msmk/msm.hpp"
#include "msmk/tensor.hpp"

namespace msmk {

inline constexpr std::uint32_t kFormatVersion = 1;

/// A checkpoint or cache file whose kind or parameters do not fit the caller's model.
class KindMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};

struct NamedTensor {
  std::string name;
  Matrix<float> value;
};

/// Named float32 tensors plus a structured header.
///
/// On disk: "MSMK", u32 version, u32 header length, header JSON
/// {kind, meta, tensors: [{name, shape, offset}]}, the payloads as
/// little-endian float32 in row-major order, then a u64 FNV-1a digest of
/// every preceding byte.
struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Matrix<float>& at(const std::string& name) const;
};

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

std::string encode_container(const Container& c);
/// Throws LoadError on a bad magic, version, length or digest.
Container decode_container(const std::string& bytes);

/// Writes to a sibling temporary then renames, so readers never see a partial file.
void write_container(const std::filesystem::path& path, const Container& c);
/// `expected_kind`, when nonempty, must match the stored kind (KindMismatchError).
Container read_container(const std::filesystem::path& path, const std::string& expected_kind = "");

/// Spectrogram cache entry: kind "spectrogram", tensor "frames", meta
/// {T, F, hop_s, source_path} plus `extra`.
Container spectrogram_container(const Spectrogram& spec, const std::string& source_path,
                                const nlohmann::json& extra = nlohmann::json::object());
Spectrogram spectrogram_from(const Container& c);

void save_checkpoint(const std::filesystem::path& path, const MsmConfig& cfg, const MsmModel<float>& model,
                     const TrainState& state);

struct LoadedCheckpoint {
  MsmConfig config;
  MsmModel<float> model;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Loads parameters and train state into an existing model. The stored
/// backbone and every parameter shape must match (KindMismatchError).
void load_checkpoint_into(const std::filesystem::path& path, const MsmConfig& cfg, MsmModel<float>& model,
                          TrainState& state);

}  // namespace msmk
