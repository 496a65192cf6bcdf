// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "msmk/audio.hpp"
#include "msmk/errors.hpp"
#include "msmk/layers.hpp"
#include "msmk/patching.hpp"
#include "msmk/random.hpp"
#include "msmk/ssm.hpp"
#include "msmk/tensor.hpp"
#include "msmk/transformer.hpp"
#include "msmk/xlstm.hpp"

namespace msmk {

enum class BackboneKind { Transformer, Mamba, MLstm };
enum class SizePreset { Tiny, Small, Base };

BackboneKind parse_backbone(const std::string& name);
std::string to_string(BackboneKind kind);
SizePreset parse_size(const std::string& name);
std::string to_string(SizePreset size);

/// Pretraining recipe. Width, depth and head overrides of zero or below fall
/// back to the size preset; the full-scale recipe is batch 1024 for 100 epochs.
struct MsmConfig {
  BackboneKind backbone = BackboneKind::Transformer;
  SizePreset size = SizePreset::Tiny;
  int d_enc = 0;
  int layers = -1;
  int heads = 0;
  int patch_t = 4;
  int patch_f = 16;
  double mask_ratio = 0.5;
  MaskStrategy mask_strategy = MaskStrategy::Unstructured;
  double crop_s = 2.0;
  int epochs = 10;
  int warmup_epochs = 10;
  int batch_size = 16;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double clip_norm = 0.0;  // global gradient norm; 0 disables
  int n_mels = 80;
  std::uint64_t seed = 0;

  Eigen::Index resolved_d_enc() const;
  int resolved_layers() const;
  int resolved_heads() const;  // attention heads, or mLSTM heads for the xLSTM backbone
  Eigen::Index patch_width() const { return static_cast<Eigen::Index>(patch_t) * patch_f; }

  void validate() const;

  /// Flat key=value view; apply_setting accepts the same keys.
  std::map<std::string, std::string> settings() const;
  /// Returns false for an unknown key; throws ParseError for a bad value.
  bool apply_setting(const std::string& key, const std::string& value);
};

TransformerConfig transformer_config(const MsmConfig& cfg);
MambaConfig mamba_config(const MsmConfig& cfg);
ViLConfig vil_config(const MsmConfig& cfg);

template <typename Scalar>
using Backbone = std::variant<TransformerEncoder<Scalar>, MambaEncoder<Scalar>, ViLEncoder<Scalar>>;

template <typename Scalar>
Backbone<Scalar> make_backbone(const MsmConfig& cfg) {
  switch (cfg.backbone) {
    case BackboneKind::Transformer:
      return make_transformer<Scalar>(transformer_config(cfg));
    case BackboneKind::Mamba:
      return make_mamba<Scalar>(mamba_config(cfg));
    case BackboneKind::MLstm:
      return make_vil<Scalar>(vil_config(cfg));
  }
  throw ContractError("unknown backbone");
}

/// Reconstruction head: d_enc -> d_enc (GELU) -> t*f, applied per position.
template <typename Scalar>
struct Decoder {
  Linear<Scalar> hidden;
  Linear<Scalar> out;

  Decoder() = default;
  Decoder(Eigen::Index d_enc, Eigen::Index patch_width) : hidden(d_enc, d_enc), out(d_enc, patch_width) {}

  void init(Rng& rng, double stddev = 0.02) {
    hidden.init(rng, stddev);
    out.init(rng, stddev);
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& z) const {
    return out(tape, gelu(hidden(tape, z)));
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    hidden.visit(f, prefix + "hidden.");
    out.visit(f, prefix + "out.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    hidden.visit(f, prefix + "hidden.");
    out.visit(f, prefix + "out.");
  }
};

/// Embedding, backbone and reconstruction decoder of one masked spectrogram model.
template <typename Scalar>
struct MsmModel {
  BackboneKind kind = BackboneKind::Transformer;
  Embedding<Scalar> embedding;
  Backbone<Scalar> encoder;
  Decoder<Scalar> decoder;

  explicit MsmModel(const MsmConfig& cfg)
      : kind(cfg.backbone),
        embedding(cfg.patch_width(), cfg.resolved_d_enc()),
        encoder(make_backbone<Scalar>(cfg)),
        decoder(cfg.resolved_d_enc(), cfg.patch_width()) {}

  Eigen::Index d_enc() const { return embedding.dim(); }
  Eigen::Index patch_width() const { return embedding.projection.weight.rows(); }

  void init(const Rng& rng, double stddev = 0.02) {
    Rng e = rng.split(0), b = rng.split(1), d = rng.split(2);
    embedding.init(e);
    std::visit([&](auto& enc) { enc.init(b, stddev); }, encoder);
    decoder.init(d, stddev);
  }

  /// Encoder output with the cls row first; masked patches are substituted
  /// by the mask token when a plan is given.
  Tensor<Scalar> encode(Tape<Scalar>& tape, const Matrix<Scalar>& x_p, const MaskPlan* plan = nullptr) const {
    Tensor<Scalar> x = embed(tape, x_p, embedding, true);
    if (plan) x = apply_mask_tokens(tape, x, *plan, embedding, true);
    return std::visit([&](const auto& enc) { return enc(tape, x); }, encoder);
  }

  /// Per-patch reconstruction, N x (t*f).
  Tensor<Scalar> reconstruct(Tape<Scalar>& tape, const Matrix<Scalar>& x_p, const MaskPlan& plan) const {
    Tensor<Scalar> z = encode(tape, x_p, &plan);
    return decoder(tape, slice_rows(z, 1, z.rows() - 1));
  }

  /// Embedding plus encoder; the decoder is discarded after pretraining.
  std::size_t encoder_parameter_count() const {
    std::size_t n = parameter_count(embedding);
    std::visit([&](const auto& enc) { n += parameter_count(enc); }, encoder);
    return n;
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    embedding.visit(f, prefix + "embed.");
    std::visit([&](auto& enc) { enc.visit(f, prefix + "encoder."); }, encoder);
    decoder.visit(f, prefix + "decoder.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    embedding.visit(f, prefix + "embed.");
    std::visit([&](const auto& enc) { enc.visit(f, prefix + "encoder."); }, encoder);
    decoder.visit(f, prefix + "decoder.");
  }
};

/// Mean of (y_pred - x_p)^2 over the masked rows and all their elements.
/// Rows outside the plan receive exactly zero gradient.
template <typename Scalar>
Tensor<Scalar> masked_mse(const Tensor<Scalar>& y_pred, const Tensor<Scalar>& x_p, const MaskPlan& plan) {
  auto& tape = detail::same_tape(y_pred, x_p);
  if (y_pred.shape() != x_p.shape()) {
    throw DimensionError("masked_mse: prediction " + y_pred.shape().str() + " vs target " + x_p.shape().str());
  }
  if (plan.masked.empty()) throw DegenerateLossError("masked_mse: the mask plan selects no patches");
  for (Eigen::Index r : plan.masked) {
    if (r < 0 || r >= y_pred.rows()) {
      throw ContractError("masked_mse: row " + std::to_string(r) + " outside " + y_pred.shape().str());
    }
  }
  using Acc = accum_t<Scalar>;
  const Acc denom = static_cast<Acc>(plan.masked.size()) * static_cast<Acc>(y_pred.cols());
  Acc total = 0;
  for (Eigen::Index r : plan.masked) {
    total += (y_pred.value().row(r) - x_p.value().row(r)).template cast<Acc>().squaredNorm();
  }
  const int yi = y_pred.id(), xi = x_p.id();
  std::vector<Eigen::Index> rows = plan.masked;
  return tape.record(Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(total / denom)), {yi, xi},
                     [yi, xi, rows, denom](Tape<Scalar>& t, int self) {
                       const Acc g = static_cast<Acc>(t.grad(self)(0, 0)) * 2 / denom;
                       Matrix<Scalar> gy = Matrix<Scalar>::Zero(t.value(yi).rows(), t.value(yi).cols());
                       for (Eigen::Index r : rows) {
                         gy.row(r) = ((t.value(yi).row(r) - t.value(xi).row(r)).template cast<Acc>() * g)
                                         .template cast<Scalar>();
                       }
                       t.accumulate(yi, gy);
                       t.accumulate(xi, -gy);
                     });
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct Moments {
  Matrix<Scalar> m;
  Matrix<Scalar> v;
};

/// One AdamW step at 1-based `step`: p <- p - lr*wd*p, then the bias-corrected
/// Adam update from the moments.
template <typename Scalar>
void adamw_update(Matrix<Scalar>& p, const Matrix<Scalar>& grad, Moments<Scalar>& mom, std::int64_t step, double lr,
                  double wd, const AdamWOptions& opt = {}) {
  if (grad.rows() != p.rows() || grad.cols() != p.cols()) {
    throw DimensionError("adamw: gradient " + shape_of(grad).str() + " vs parameter " + shape_of(p).str());
  }
  if (step < 1) throw ContractError("adamw: step counts from 1");
  if (mom.m.size() == 0) mom.m = Matrix<Scalar>::Zero(p.rows(), p.cols());
  if (mom.v.size() == 0) mom.v = Matrix<Scalar>::Zero(p.rows(), p.cols());
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double g = grad.data()[i];
    const double m = opt.beta1 * mom.m.data()[i] + (1.0 - opt.beta1) * g;
    const double v = opt.beta2 * mom.v.data()[i] + (1.0 - opt.beta2) * g * g;
    mom.m.data()[i] = static_cast<Scalar>(m);
    mom.v.data()[i] = static_cast<Scalar>(v);
    double x = p.data()[i];
    x -= lr * wd * x;
    x -= lr * (m / c1) / (std::sqrt(v / c2) + opt.eps);
    p.data()[i] = static_cast<Scalar>(x);
  }
}

/// Warmup length for `warmup_epochs` out of `epochs`, capped at the whole run.
inline std::int64_t warmup_steps(std::int64_t total_steps, int epochs, int warmup_epochs = 10) {
  if (epochs <= 0) throw ContractError("warmup_steps: epochs must be positive");
  const double frac = std::min(1.0, static_cast<double>(std::max(warmup_epochs, 0)) / epochs);
  return std::llround(static_cast<double>(total_steps) * frac);
}

/// Linear warmup from 0 to base_lr, then cosine decay reaching 0 at the final step.
inline double lr_at(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup) {
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const std::int64_t span = total_steps - 1 - warmup;
  if (span <= 0) return base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

struct TrainState {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  Rng rng;                               // step s draws from rng.split(s)
  std::vector<Moments<float>> moments;  // model visit order
};

struct StepResult {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// A non-finite loss or gradient. `dump` holds a line-per-parameter report.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, std::string dump) : NumericError(what), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

TrainState make_train_state(const MsmModel<float>& model, std::uint64_t seed);

/// Patches of one cropped spectrogram with their mask.
struct MaskedItem {
  Matrix<float> x_p;
  MaskPlan plan;
};

/// Crop, patchify and mask one spectrogram; crop and mask draw from `rng`.
MaskedItem prepare_item(const MsmConfig& cfg, const Spectrogram& spec, Rng rng);

/// Masked MSE of the model's reconstruction of one item.
Tensor<float> item_loss(Tape<float>& tape, const MsmModel<float>& model, const MaskedItem& item);

/// One optimization step on `batch`; the loss is the mean of the item losses
/// before the update. Item i of step s is prepared from state.rng.split(s).split(i).
StepResult pretrain_step(MsmModel<float>& model, TrainState& state, const MsmConfig& cfg,
                         const std::vector<Spectrogram>& batch, std::int64_t total_steps);

/// Same, on already prepared items.
StepResult pretrain_step(MsmModel<float>& model, TrainState& state, const MsmConfig& cfg,
                         const std::vector<MaskedItem>& batch, std::int64_t total_steps);

/// Epoch-wise shuffled batches over a fixed dataset.
class Pretrainer {
 public:
  Pretrainer(MsmConfig cfg, std::vector<Spectrogram> data);

  std::int64_t steps_per_epoch() const;
  std::int64_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
  bool done() const { return state_.step >= total_steps(); }

  /// Dataset indices of the batch at `step`.
  std::vector<std::size_t> batch_indices(std::int64_t step) const;

  StepResult step();

  const MsmConfig& config() const { return cfg_; }
  MsmModel<float>& model() { return model_; }
  const MsmModel<float>& model() const { return model_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }

 private:
  MsmConfig cfg_;
  std::vector<Spectrogram> data_;
  MsmModel<float> model_;
  TrainState state_;
};

}  // namespace msmk
