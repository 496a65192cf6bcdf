// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "msmk/layers.hpp"

namespace msmk {

struct TransformerConfig {
  Eigen::Index d_enc = 192;
  int layers = 12;
  int heads = 3;
  int mlp_ratio = 4;

  static TransformerConfig tiny() { return {192, 12, 3, 4}; }
  static TransformerConfig small() { return {384, 12, 6, 4}; }
  static TransformerConfig base() { return {768, 12, 12, 4}; }

  void validate() const {
    if (d_enc <= 0 || heads <= 0 || d_enc % heads != 0) {
      throw DimensionError("transformer: d_enc=" + std::to_string(d_enc) + " is not divisible by h=" +
                           std::to_string(heads));
    }
    if (layers < 0 || mlp_ratio <= 0) throw ContractError("transformer: layers and mlp_ratio must be positive");
  }
};

/// softmax(Q K^T / sqrt(d_k)) V. When `weights` is given the attention matrix
/// is copied into it.
template <typename Scalar>
Tensor<Scalar> sdpa(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                    Matrix<Scalar>* weights = nullptr) {
  if (q.shape() != k.shape() || k.shape() != v.shape()) {
    throw DimensionError("sdpa: Q " + q.shape().str() + ", K " + k.shape().str() + ", V " + v.shape().str());
  }
  const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  Tensor<Scalar> a = softmax(scale(matmul(q, transpose(k)), s), 1);
  if (weights) *weights = a.value();
  return matmul(a, v);
}

template <typename Scalar>
struct MultiHeadAttention {
  Linear<Scalar> qkv;
  Linear<Scalar> out;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Eigen::Index d, int h) : qkv(d, 3 * d), out(d, d), heads(h) {}

  void init(Rng& rng, double stddev = 0.02) {
    qkv.init(rng, stddev);
    out.init(rng, stddev);
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x,
                            std::vector<Matrix<Scalar>>* weights = nullptr) const {
    const Eigen::Index d = out.weight.cols(), dk = d / heads;
    Tensor<Scalar> p = qkv(tape, x);
    std::vector<Tensor<Scalar>> parts;
    if (weights) weights->assign(static_cast<std::size_t>(heads), {});
    for (int h = 0; h < heads; ++h) {
      parts.push_back(sdpa(slice_cols(p, h * dk, dk), slice_cols(p, d + h * dk, dk), slice_cols(p, 2 * d + h * dk, dk),
                           weights ? &(*weights)[static_cast<std::size_t>(h)] : nullptr));
    }
    return out(tape, heads == 1 ? parts[0] : concat_cols(parts));
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    qkv.visit(f, prefix + "qkv.");
    out.visit(f, prefix + "out.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    qkv.visit(f, prefix + "qkv.");
    out.visit(f, prefix + "out.");
  }
};

/// Pre-norm block: x + mha(ln(x)), then + mlp(ln(.)).
template <typename Scalar>
struct TransformerBlock {
  Norm<Scalar> norm1, norm2;
  MultiHeadAttention<Scalar> attn;
  Linear<Scalar> fc1, fc2;

  TransformerBlock() = default;
  explicit TransformerBlock(const TransformerConfig& cfg)
      : norm1(cfg.d_enc),
        norm2(cfg.d_enc),
        attn(cfg.d_enc, cfg.heads),
        fc1(cfg.d_enc, cfg.mlp_ratio * cfg.d_enc),
        fc2(cfg.mlp_ratio * cfg.d_enc, cfg.d_enc) {}

  void init(Rng& rng, double stddev = 0.02) {
    attn.init(rng, stddev);
    fc1.init(rng, stddev);
    fc2.init(rng, stddev);
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x,
                            std::vector<Matrix<Scalar>>* weights = nullptr) const {
    Tensor<Scalar> y = add(x, attn(tape, norm1(tape, x), weights));
    return add(y, fc2(tape, gelu(fc1(tape, norm2(tape, y)))));
  }

  /// Zeroes the projections that write into the residual stream.
  void zero_output_projections() {
    attn.out.weight.setZero();
    attn.out.bias.setZero();
    fc2.weight.setZero();
    fc2.bias.setZero();
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    norm1.visit(f, prefix + "norm1.");
    attn.visit(f, prefix + "attn.");
    norm2.visit(f, prefix + "norm2.");
    fc1.visit(f, prefix + "fc1.");
    fc2.visit(f, prefix + "fc2.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    norm1.visit(f, prefix + "norm1.");
    attn.visit(f, prefix + "attn.");
    norm2.visit(f, prefix + "norm2.");
    fc1.visit(f, prefix + "fc1.");
    fc2.visit(f, prefix + "fc2.");
  }
};

/// A stack of blocks followed by a learnable layer norm.
template <typename Block, typename Scalar>
struct Encoder {
  std::vector<Block> blocks;
  Norm<Scalar> final_norm;

  template <typename Config>
  Encoder(const Config& cfg, Eigen::Index d_enc, int layers) : final_norm(d_enc) {
    for (int i = 0; i < layers; ++i) blocks.emplace_back(cfg);
  }
  Encoder() = default;

  void init(Rng& rng, double stddev = 0.02) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Rng r = rng.split(i);
      blocks[i].init(r, stddev);
    }
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, Tensor<Scalar> x) const {
    for (const auto& b : blocks) x = b(tape, x);
    return final_norm(tape, x);
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, prefix + "blocks." + std::to_string(i) + ".");
    final_norm.visit(f, prefix + "norm.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, prefix + "blocks." + std::to_string(i) + ".");
    final_norm.visit(f, prefix + "norm.");
  }
};

template <typename Scalar>
using TransformerEncoder = Encoder<TransformerBlock<Scalar>, Scalar>;

template <typename Scalar>
TransformerEncoder<Scalar> make_transformer(const TransformerConfig& cfg) {
  cfg.validate();
  return TransformerEncoder<Scalar>(cfg, cfg.d_enc, cfg.layers);
}

}  // namespace msmk
