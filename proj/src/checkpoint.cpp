// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace msmk {

static_assert(std::endian::native == std::endian::little, "container payloads are written as host floats");

namespace {

constexpr char kMagic[4] = {'M', 'S', 'M', 'K'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t pos) {
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  return v;
}

std::string param_key(const std::string& prefix, const std::string& name) { return prefix + "/" + name; }

}  // namespace

const Matrix<float>& Container::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw LoadError("container has no tensor '" + name + "'");
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string encode_container(const Container& c) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    dir.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.value.size()) * sizeof(float);
  }
  const nlohmann::json header = {{"kind", c.kind}, {"meta", c.meta}, {"tensors", dir}};
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& t : c.tensors) {
    out.append(reinterpret_cast<const char*>(t.value.data()), static_cast<std::size_t>(t.value.size()) * sizeof(float));
  }
  put<std::uint64_t>(out, fnv1a64(out.data(), out.size()));
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < 12 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw LoadError(bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0 ? "not an MSMK container"
                                                                                  : "truncated container");
  }
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kFormatVersion) {
    throw LoadError("container format version " + std::to_string(version) + " (this build reads " +
                    std::to_string(kFormatVersion) + ")");
  }
  const std::size_t header_len = get<std::uint32_t>(bytes, 8);
  if (12 + header_len + 8 > bytes.size()) throw LoadError("truncated container header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("container header: ") + e.what());
  }

  Container c;
  std::size_t payload_bytes = 0;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
      const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (rows < 0 || cols < 0 || offset != payload_bytes) throw LoadError("container directory is inconsistent");
      c.tensors.push_back({entry.at("name").get<std::string>(), Matrix<float>(rows, cols)});
      payload_bytes += static_cast<std::size_t>(rows * cols) * sizeof(float);
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("container header: ") + e.what());
  }

  const std::size_t body = 12 + header_len;
  if (bytes.size() < body + payload_bytes + 8) throw LoadError("truncated container payload");
  if (bytes.size() > body + payload_bytes + 8) throw LoadError("trailing bytes after container digest");
  const std::size_t digest_at = body + payload_bytes;
  if (get<std::uint64_t>(bytes, digest_at) != fnv1a64(bytes.data(), digest_at)) {
    throw LoadError("container digest mismatch");
  }
  std::size_t pos = body;
  for (auto& t : c.tensors) {
    const std::size_t n = static_cast<std::size_t>(t.value.size()) * sizeof(float);
    if (n) std::memcpy(t.value.data(), bytes.data() + pos, n);
    pos += n;
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const std::string bytes = encode_container(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Container c;
  try {
    c = decode_container(bytes);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  if (!expected_kind.empty() && c.kind != expected_kind) {
    throw KindMismatchError(path.string() + ": holds a '" + c.kind + "' container, expected '" + expected_kind + "'");
  }
  return c;
}

Container spectrogram_container(const Spectrogram& spec, const std::string& source_path, const nlohmann::json& extra) {
  Container c;
  c.kind = "spectrogram";
  c.meta = extra;
  c.meta["T"] = spec.frames.rows();
  c.meta["F"] = spec.frames.cols();
  c.meta["hop_s"] = spec.hop_s;
  c.meta["source_path"] = source_path;
  c.tensors.push_back({"frames", spec.frames});
  return c;
}

Spectrogram spectrogram_from(const Container& c) {
  if (c.kind != "spectrogram") throw KindMismatchError("expected a spectrogram container, found '" + c.kind + "'");
  Spectrogram s;
  s.frames = c.at("frames");
  try {
    s.hop_s = c.meta.at("hop_s").get<double>();
    if (c.meta.at("T").get<Eigen::Index>() != s.frames.rows() || c.meta.at("F").get<Eigen::Index>() != s.frames.cols()) {
      throw LoadError("spectrogram header disagrees with its frames");
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("spectrogram header: ") + e.what());
  }
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const MsmConfig& cfg, const MsmModel<float>& model,
                     const TrainState& state) {
  Container c;
  c.kind = "checkpoint";
  c.meta = {{"config", cfg.settings()},
            {"step", state.step},
            {"epoch", state.epoch},
            {"rng", {{"key", state.rng.key()}, {"counter", state.rng.counter()}}},
            {"encoder_parameters", model.encoder_parameter_count()}};
  std::vector<NamedTensor> m, v;
  std::size_t k = 0;
  model.visit(
      [&](const std::string& name, const Matrix<float>& p) {
        c.tensors.push_back({param_key("param", name), p});
        m.push_back({param_key("adam_m", name), state.moments.at(k).m});
        v.push_back({param_key("adam_v", name), state.moments.at(k).v});
        ++k;
      },
      "");
  for (auto& t : m) c.tensors.push_back(std::move(t));
  for (auto& t : v) c.tensors.push_back(std::move(t));
  write_container(path, c);
}

namespace {

MsmConfig config_from(const Container& c, const std::filesystem::path& path) {
  MsmConfig cfg;
  try {
    for (const auto& [key, value] : c.meta.at("config").items()) {
      if (!cfg.apply_setting(key, value.get<std::string>())) {
        throw LoadError(path.string() + ": unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  } catch (const ParseError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return cfg;
}

/// Validates everything before touching `model` or `state`.
void fill(const Container& c, const std::filesystem::path& path, MsmModel<float>& model, TrainState& state) {
  std::vector<const Matrix<float>*> params;
  std::vector<Moments<float>> moments;
  model.visit(
      [&](const std::string& name, const Matrix<float>& p) {
        const Matrix<float>* stored = nullptr;
        try {
          stored = &c.at(param_key("param", name));
          moments.push_back({c.at(param_key("adam_m", name)), c.at(param_key("adam_v", name))});
        } catch (const LoadError&) {
          throw KindMismatchError(path.string() + ": checkpoint has no parameter '" + name + "'");
        }
        if (stored->rows() != p.rows() || stored->cols() != p.cols()) {
          throw KindMismatchError(path.string() + ": parameter '" + name + "' is " + shape_of(*stored).str() +
                                  ", model expects " + shape_of(p).str());
        }
        params.push_back(stored);
      },
      "");
  if (3 * params.size() != c.tensors.size()) {
    throw KindMismatchError(path.string() + ": checkpoint holds parameters the model does not have");
  }
  TrainState next;
  try {
    next.step = c.meta.at("step").get<std::int64_t>();
    next.epoch = c.meta.at("epoch").get<std::int64_t>();
    next.rng = Rng::from_state(c.meta.at("rng").at("key").get<std::uint64_t>(),
                               c.meta.at("rng").at("counter").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  next.moments = std::move(moments);
  std::size_t k = 0;
  model.visit([&](const std::string&, Matrix<float>& p) { p = *params[k++]; }, "");
  state = std::move(next);
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path, "checkpoint");
  MsmConfig cfg = config_from(c, path);
  LoadedCheckpoint out{cfg, MsmModel<float>(cfg), TrainState{0, 0, Rng(0), {}}};
  fill(c, path, out.model, out.state);
  return out;
}

void load_checkpoint_into(const std::filesystem::path& path, const MsmConfig& cfg, MsmModel<float>& model,
                          TrainState& state) {
  const Container c = read_container(path, "checkpoint");
  const MsmConfig stored = config_from(c, path);
  if (stored.backbone != cfg.backbone) {
    throw KindMismatchError(path.string() + ": checkpoint is a " + to_string(stored.backbone) +
                            " model, config asks for " + to_string(cfg.backbone));
  }
  fill(c, path, model, state);
}

}  // namespace msmk
