// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/msm.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <sstream>

namespace msmk {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ParseError("setting '" + key + "': cannot parse '" + value + "' as a number");
  }
  return out;
}

}  // namespace

BackboneKind parse_backbone(const std::string& name) {
  if (name == "transformer") return BackboneKind::Transformer;
  if (name == "mamba") return BackboneKind::Mamba;
  if (name == "mlstm") return BackboneKind::MLstm;
  throw ContractError("unknown backbone '" + name + "' (expected transformer, mamba or mlstm)");
}

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::Transformer:
      return "transformer";
    case BackboneKind::Mamba:
      return "mamba";
    case BackboneKind::MLstm:
      return "mlstm";
  }
  return "?";
}

SizePreset parse_size(const std::string& name) {
  if (name == "tiny") return SizePreset::Tiny;
  if (name == "small") return SizePreset::Small;
  if (name == "base") return SizePreset::Base;
  throw ContractError("unknown size '" + name + "' (expected tiny, small or base)");
}

std::string to_string(SizePreset size) {
  switch (size) {
    case SizePreset::Tiny:
      return "tiny";
    case SizePreset::Small:
      return "small";
    case SizePreset::Base:
      return "base";
  }
  return "?";
}

Eigen::Index MsmConfig::resolved_d_enc() const {
  if (d_enc > 0) return d_enc;
  switch (size) {
    case SizePreset::Tiny:
      return 192;
    case SizePreset::Small:
      return 384;
    case SizePreset::Base:
      return 768;
  }
  return 192;
}

int MsmConfig::resolved_layers() const { return layers >= 0 ? layers : 12; }

int MsmConfig::resolved_heads() const {
  if (heads > 0) return heads;
  if (backbone == BackboneKind::MLstm) return 4;
  switch (size) {
    case SizePreset::Tiny:
      return 3;
    case SizePreset::Small:
      return 6;
    case SizePreset::Base:
      return 12;
  }
  return 3;
}

void MsmConfig::validate() const {
  if (patch_t <= 0 || patch_f <= 0) throw ContractError("config: patch sizes must be positive");
  if (n_mels <= 0 || n_mels % patch_f != 0) {
    throw ContractError("config: n_mels=" + std::to_string(n_mels) + " is not a multiple of patch_f=" +
                        std::to_string(patch_f));
  }
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ContractError("config: mask_ratio must lie in (0, 1)");
  if (!(crop_s > 0.0)) throw ContractError("config: crop_s must be positive");
  if (epochs <= 0 || batch_size <= 0) throw ContractError("config: epochs and batch_size must be positive");
  if (warmup_epochs < 0) throw ContractError("config: warmup_epochs must be non-negative");
  if (!(base_lr >= 0.0) || !(weight_decay >= 0.0) || !(clip_norm >= 0.0)) {
    throw ContractError("config: base_lr, weight_decay and clip_norm must be non-negative");
  }
  switch (backbone) {
    case BackboneKind::Transformer:
      transformer_config(*this).validate();
      break;
    case BackboneKind::Mamba:
      mamba_config(*this).validate();
      break;
    case BackboneKind::MLstm:
      vil_config(*this).validate();
      break;
  }
}

std::map<std::string, std::string> MsmConfig::settings() const {
  return {
      {"backbone", to_string(backbone)},
      {"size", to_string(size)},
      {"d_enc", std::to_string(d_enc)},
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"patch_t", std::to_string(patch_t)},
      {"patch_f", std::to_string(patch_f)},
      {"mask_ratio", format_double(mask_ratio)},
      {"mask_strategy", to_string(mask_strategy)},
      {"crop_s", format_double(crop_s)},
      {"epochs", std::to_string(epochs)},
      {"warmup_epochs", std::to_string(warmup_epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"base_lr", format_double(base_lr)},
      {"weight_decay", format_double(weight_decay)},
      {"clip_norm", format_double(clip_norm)},
      {"n_mels", std::to_string(n_mels)},
      {"seed", std::to_string(seed)},
  };
}

bool MsmConfig::apply_setting(const std::string& key, const std::string& value) {
  try {
    if (key == "backbone") {
      backbone = parse_backbone(value);
    } else if (key == "size") {
      size = parse_size(value);
    } else if (key == "mask_strategy") {
      mask_strategy = parse_mask_strategy(value);
    } else if (key == "d_enc") {
      d_enc = parse_number<int>(key, value);
    } else if (key == "layers") {
      layers = parse_number<int>(key, value);
    } else if (key == "heads") {
      heads = parse_number<int>(key, value);
    } else if (key == "patch_t") {
      patch_t = parse_number<int>(key, value);
    } else if (key == "patch_f") {
      patch_f = parse_number<int>(key, value);
    } else if (key == "mask_ratio") {
      mask_ratio = parse_number<double>(key, value);
    } else if (key == "crop_s") {
      crop_s = parse_number<double>(key, value);
    } else if (key == "epochs") {
      epochs = parse_number<int>(key, value);
    } else if (key == "warmup_epochs") {
      warmup_epochs = parse_number<int>(key, value);
    } else if (key == "batch_size") {
      batch_size = parse_number<int>(key, value);
    } else if (key == "base_lr") {
      base_lr = parse_number<double>(key, value);
    } else if (key == "weight_decay") {
      weight_decay = parse_number<double>(key, value);
    } else if (key == "clip_norm") {
      clip_norm = parse_number<double>(key, value);
    } else if (key == "n_mels") {
      n_mels = parse_number<int>(key, value);
    } else if (key == "seed") {
      seed = parse_number<std::uint64_t>(key, value);
    } else {
      return false;
    }
  } catch (const ContractError& e) {
    throw ParseError("setting '" + key + "': " + e.what());
  }
  return true;
}

TransformerConfig transformer_config(const MsmConfig& cfg) {
  return {cfg.resolved_d_enc(), cfg.resolved_layers(), cfg.resolved_heads(), 4};
}

MambaConfig mamba_config(const MsmConfig& cfg) { return {cfg.resolved_d_enc(), cfg.resolved_layers(), 3, 24, 4}; }

ViLConfig vil_config(const MsmConfig& cfg) {
  return {cfg.resolved_d_enc(), cfg.resolved_layers(), 3, cfg.resolved_heads(), 4, 4};
}

TrainState make_train_state(const MsmModel<float>& model, std::uint64_t seed) {
  TrainState state;
  state.rng = Rng(seed).split(2);
  model.visit(
      [&](const std::string&, const Matrix<float>& p) {
        state.moments.push_back({Matrix<float>::Zero(p.rows(), p.cols()), Matrix<float>::Zero(p.rows(), p.cols())});
      },
      "");
  return state;
}

MaskedItem prepare_item(const MsmConfig& cfg, const Spectrogram& spec, Rng rng) {
  const std::uint64_t crop_seed = rng.next_u64();
  const std::uint64_t mask_seed = rng.next_u64();
  const Spectrogram crop = random_crop(spec, cfg.crop_s, crop_seed);
  PatchSet<float> ps = patchify(crop.frames, cfg.patch_t, cfg.patch_f);
  MaskPlan plan = make_mask(ps.x_p.rows(), cfg.mask_ratio, cfg.mask_strategy, mask_seed);
  return {std::move(ps.x_p), std::move(plan)};
}

Tensor<float> item_loss(Tape<float>& tape, const MsmModel<float>& model, const MaskedItem& item) {
  return masked_mse(model.reconstruct(tape, item.x_p, item.plan), tape.constant(item.x_p), item.plan);
}

namespace {

std::string diagnostic_dump(const MsmModel<float>& model, const std::vector<Matrix<float>>& grads) {
  std::ostringstream out;
  std::size_t k = 0;
  model.visit(
      [&](const std::string& name, const Matrix<float>& p) {
        const Matrix<float>& g = grads[k++];
        out << name << " shape=" << p.rows() << "x" << p.cols() << " param_finite=" << p.allFinite()
            << " param_max=" << (p.size() ? p.cwiseAbs().maxCoeff() : 0.0f) << " grad_finite=" << g.allFinite()
            << " grad_norm=" << g.norm() << "\n";
      },
      "");
  return out.str();
}

}  // namespace

StepResult pretrain_step(MsmModel<float>& model, TrainState& state, const MsmConfig& cfg,
                         const std::vector<Spectrogram>& batch, std::int64_t total_steps) {
  const Rng step_rng = state.rng.split(static_cast<std::uint64_t>(state.step));
  std::vector<MaskedItem> items;
  items.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) items.push_back(prepare_item(cfg, batch[i], step_rng.split(i)));
  return pretrain_step(model, state, cfg, items, total_steps);
}

StepResult pretrain_step(MsmModel<float>& model, TrainState& state, const MsmConfig& cfg,
                         const std::vector<MaskedItem>& batch, std::int64_t total_steps) {
  if (batch.empty()) throw ContractError("pretrain_step: empty batch");
  std::vector<Matrix<float>*> params;
  model.visit([&](const std::string&, Matrix<float>& p) { params.push_back(&p); }, "");
  if (state.moments.size() != params.size()) {
    throw ContractError("pretrain_step: train state does not match the model's parameters");
  }
  std::vector<Matrix<float>> grads;
  grads.reserve(params.size());
  for (auto* p : params) grads.push_back(Matrix<float>::Zero(p->rows(), p->cols()));

  StepResult result;
  result.step = state.step;
  result.lr = lr_at(state.step, total_steps, cfg.base_lr, warmup_steps(total_steps, cfg.epochs, cfg.warmup_epochs));

  const float inv_batch = 1.0f / static_cast<float>(batch.size());
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::string where = " at step " + std::to_string(state.step) + " (batch item " + std::to_string(i) + ")";
    Tape<float> tape;
    Tensor<float> loss;
    try {
      loss = item_loss(tape, model, batch[i]);
    } catch (const NumericError& e) {
      throw TrainingAborted(std::string("non-finite forward pass") + where + ": " + e.what(),
                            diagnostic_dump(model, grads));
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingAborted("non-finite loss" + where, diagnostic_dump(model, grads));
    loss_sum += value;
    tape.backward(loss);
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (const Matrix<float>* g = tape.grad_of(*params[k])) grads[k] += *g * inv_batch;
    }
  }
  result.loss = loss_sum / static_cast<double>(batch.size());

  double sq = 0.0;
  for (const auto& g : grads) sq += g.cast<double>().squaredNorm();
  if (!std::isfinite(sq)) {
    throw TrainingAborted("non-finite gradient at step " + std::to_string(state.step),
                          diagnostic_dump(model, grads));
  }
  if (cfg.clip_norm > 0.0 && std::sqrt(sq) > cfg.clip_norm) {
    const float s = static_cast<float>(cfg.clip_norm / std::sqrt(sq));
    for (auto& g : grads) g *= s;
  }

  for (std::size_t k = 0; k < params.size(); ++k) {
    adamw_update(*params[k], grads[k], state.moments[k], state.step + 1, result.lr, cfg.weight_decay);
  }
  ++state.step;
  return result;
}

Pretrainer::Pretrainer(MsmConfig cfg, std::vector<Spectrogram> data)
    : cfg_(std::move(cfg)), data_(std::move(data)), model_((cfg_.validate(), cfg_)) {
  if (data_.empty()) throw ContractError("pretrainer: empty dataset");
  model_.init(Rng(cfg_.seed).split(1));
  state_ = make_train_state(model_, cfg_.seed);
}

std::int64_t Pretrainer::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(data_.size());
  return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

std::vector<std::size_t> Pretrainer::batch_indices(std::int64_t step) const {
  const std::int64_t spe = steps_per_epoch();
  const std::int64_t epoch = step / spe, pos = step % spe;
  std::vector<std::size_t> perm(data_.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = state_.rng.split(kShuffleStream).split(static_cast<std::uint64_t>(epoch));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const std::size_t begin = static_cast<std::size_t>(pos) * static_cast<std::size_t>(cfg_.batch_size);
  const std::size_t end = std::min(perm.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

StepResult Pretrainer::step() {
  if (done()) throw ContractError("pretrainer: all " + std::to_string(total_steps()) + " steps already ran");
  std::vector<Spectrogram> batch;
  for (std::size_t i : batch_indices(state_.step)) batch.push_back(data_[i]);
  StepResult r = pretrain_step(model_, state_, cfg_, batch, total_steps());
  state_.epoch = state_.step / steps_per_epoch();
  return r;
}

}  // namespace msmk
