// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <string>
#include <vector>

#include "msmk/random.hpp"
#include "msmk/tensor.hpp"

namespace msmk {

namespace detail {

/// Per-row normalization over `groups` equal column segments.
template <typename Scalar>
Tensor<Scalar> segment_norm(const Tensor<Scalar>& x, int groups, const Tensor<Scalar>& gain,
                            const Tensor<Scalar>& bias, Scalar eps, const char* op) {
  using Acc = accum_t<Scalar>;
  Tape<Scalar>& tape = same_tape(x, gain);
  same_tape(x, bias);
  const Eigen::Index rows = x.rows(), cols = x.cols();
  if (groups <= 0 || cols % groups != 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(cols) +
                         " channels are not divisible into " + std::to_string(groups) + " groups");
  }
  if (gain.shape() != Shape{1, cols} || bias.shape() != Shape{1, cols}) {
    throw DimensionError(std::string(op) + ": gain " + gain.shape().str() + " / bias " +
                         bias.shape().str() + " must be [1x" + std::to_string(cols) + "]");
  }
  if (eps < Scalar(0)) throw ContractError(std::string(op) + ": eps must be non-negative");
  const Eigen::Index width = cols / groups;
  const Matrix<Scalar>& xv = x.value();

  // Normalized activations and per-segment inverse std are kept for backward.
  Matrix<Scalar> xhat(rows, cols);
  Matrix<Scalar> inv_std(rows, groups);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int g = 0; g < groups; ++g) {
      const auto seg = xv.row(r).segment(g * width, width).template cast<Acc>();
      const Acc mu = seg.mean();
      const Acc var = (seg.array() - mu).square().mean();
      const Acc is = Acc(1) / std::sqrt(var + Acc(eps));
      inv_std(r, g) = static_cast<Scalar>(is);
      xhat.row(r).segment(g * width, width) = ((seg.array() - mu) * is).template cast<Scalar>();
    }
  }
  Matrix<Scalar> y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
                     bias.value().row(0).array();

  const int xi = x.id(), gi = gain.id(), bi = bias.id();
  return tape.record(std::move(y), {xi, gi, bi},
                     [xi, gi, bi, groups, width, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& gy = t.grad(self);
    if (t.needs_grad(gi)) {
      t.accumulate(gi, gy.cwiseProduct(xhat).template cast<Acc>().colwise().sum().template cast<Scalar>());
    }
    if (t.needs_grad(bi)) {
      t.accumulate(bi, gy.template cast<Acc>().colwise().sum().template cast<Scalar>());
    }
    if (t.needs_grad(xi)) {
      const Matrix<Scalar> gxhat = gy.array().rowwise() * t.value(gi).row(0).array();
      Matrix<Scalar> gx(gy.rows(), gy.cols());
      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
        for (int g = 0; g < groups; ++g) {
          const auto gh = gxhat.row(r).segment(g * width, width).template cast<Acc>();
          const auto xh = xhat.row(r).segment(g * width, width).template cast<Acc>();
          const Acc m1 = gh.mean();
          const Acc m2 = gh.cwiseProduct(xh).mean();
          gx.row(r).segment(g * width, width) =
              ((gh.array() - m1 - xh.array() * m2) * Acc(inv_std(r, g))).template cast<Scalar>();
        }
      }
      t.accumulate(xi, gx);
    }
  });
}

}  // namespace detail

/// Normalizes each row over its last axis, then applies gain and bias (1xC).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  return detail::segment_norm(x, 1, gain, bias, eps, "layer_norm");
}

/// Normalizes each row separately within `groups` contiguous channel groups.
template <typename Scalar>
Tensor<Scalar> group_norm(const Tensor<Scalar>& x, int groups, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  return detail::segment_norm(x, groups, gain, bias, eps, "group_norm");
}

/// Causal depthwise convolution along rows (time): x is LxD, kernel is KxD and
/// out[t,d] = sum_k kernel[k,d] * x[t-K+1+k, d], with x zero before t=0.
template <typename Scalar>
Tensor<Scalar> causal_depthwise_conv1d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel) {
  Tape<Scalar>& tape = detail::same_tape(x, kernel);
  const Eigen::Index L = x.rows(), D = x.cols(), K = kernel.rows();
  if (K < 1 || kernel.cols() != D) {
    throw DimensionError("causal_depthwise_conv1d: kernel " + kernel.shape().str() +
                         " does not match input " + x.shape().str());
  }
  const Matrix<Scalar>& xv = x.value();
  const Matrix<Scalar>& kv = kernel.value();
  Matrix<Scalar> y = Matrix<Scalar>::Zero(L, D);
  for (Eigen::Index t = 0; t < L; ++t) {
    for (Eigen::Index k = 0; k < K; ++k) {
      const Eigen::Index s = t - K + 1 + k;
      if (s >= 0) y.row(t) += kv.row(k).cwiseProduct(xv.row(s));
    }
  }
  const int xi = x.id(), ki = kernel.id();
  return tape.record(std::move(y), {xi, ki}, [xi, ki](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.grad(self);
    const Matrix<Scalar>& xv = t.value(xi);
    const Matrix<Scalar>& kv = t.value(ki);
    const Eigen::Index L = xv.rows(), D = xv.cols(), K = kv.rows();
    Matrix<Scalar> gx = Matrix<Scalar>::Zero(L, D);
    Matrix<Scalar> gk = Matrix<Scalar>::Zero(K, D);
    for (Eigen::Index tt = 0; tt < L; ++tt) {
      for (Eigen::Index k = 0; k < K; ++k) {
        const Eigen::Index s = tt - K + 1 + k;
        if (s < 0) continue;
        gx.row(s) += kv.row(k).cwiseProduct(g.row(tt));
        gk.row(k) += xv.row(s).cwiseProduct(g.row(tt));
      }
    }
    t.accumulate(xi, gx);
    t.accumulate(ki, gk);
  });
}

/// Block-diagonal projection: x is LxD and `weight` stacks D/block square
/// blocks of size block x block (shape D x block). Output column
/// b*block + j = sum_i x[:, b*block + i] * weight[b*block + i, j].
template <typename Scalar>
Tensor<Scalar> headwise_linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight) {
  Tape<Scalar>& tape = detail::same_tape(x, weight);
  const Eigen::Index D = x.cols(), block = weight.cols();
  if (weight.rows() != D || block < 1 || D % block != 0) {
    throw DimensionError("headwise_linear: weight " + weight.shape().str() + " does not tile input " +
                         x.shape().str());
  }
  const Eigen::Index nb = D / block;
  Matrix<Scalar> y(x.rows(), D);
  for (Eigen::Index b = 0; b < nb; ++b) {
    y.middleCols(b * block, block) =
        detail::product<Scalar>(x.value().middleCols(b * block, block), weight.value().middleRows(b * block, block));
  }
  const int xi = x.id(), wi = weight.id();
  return tape.record(std::move(y), {xi, wi}, [xi, wi, nb, block](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.grad(self);
    const Matrix<Scalar>& xv = t.value(xi);
    const Matrix<Scalar>& wv = t.value(wi);
    Matrix<Scalar> gx(xv.rows(), xv.cols());
    Matrix<Scalar> gw(wv.rows(), wv.cols());
    for (Eigen::Index b = 0; b < nb; ++b) {
      const auto gb = g.middleCols(b * block, block);
      gx.middleCols(b * block, block) = detail::product<Scalar>(gb, wv.middleRows(b * block, block).transpose());
      gw.middleRows(b * block, block) = detail::product<Scalar>(xv.middleCols(b * block, block).transpose(), gb);
    }
    t.accumulate(xi, gx);
    t.accumulate(wi, gw);
  });
}

/// Mean softmax cross-entropy of row logits against integer class labels.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& labels) {
  using Acc = accum_t<Scalar>;
  const Eigen::Index R = logits.rows(), K = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != R) {
    throw ContractError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(R) + " rows");
  }
  Matrix<Scalar> prob(R, K);
  Acc total = 0;
  for (Eigen::Index r = 0; r < R; ++r) {
    const int c = labels[r];
    if (c < 0 || c >= K) throw ContractError("softmax_cross_entropy: label out of range");
    const auto row = logits.value().row(r).template cast<Acc>();
    const Acc mx = row.maxCoeff();
    const Acc lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(c);
    prob.row(r) = (row.array() - lse).exp().template cast<Scalar>();
  }
  Matrix<Scalar> y(1, 1);
  y(0, 0) = static_cast<Scalar>(total / static_cast<Acc>(R));
  const int li = logits.id();
  return logits.tape().record(std::move(y), {li}, [li, labels, prob = std::move(prob)](Tape<Scalar>& t, int self) {
    Matrix<Scalar> g = prob;
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, labels[r]) -= Scalar(1);
    t.accumulate(li, g * (t.grad(self)(0, 0) / static_cast<Scalar>(g.rows())));
  });
}

/// Mean binary cross-entropy with logits against 0/1 targets of the same shape.
template <typename Scalar>
Tensor<Scalar> sigmoid_bce(const Tensor<Scalar>& logits, const Matrix<Scalar>& targets) {
  using Acc = accum_t<Scalar>;
  if (shape_of(targets) != logits.shape()) {
    throw DimensionError("sigmoid_bce: targets " + shape_of(targets).str() + " vs logits " +
                         logits.shape().str());
  }
  const Matrix<Scalar>& z = logits.value();
  Acc total = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const Acc zi = z.data()[i], yi = targets.data()[i];
    total += std::max(zi, Acc(0)) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
  }
  Matrix<Scalar> y(1, 1);
  y(0, 0) = static_cast<Scalar>(total / static_cast<Acc>(z.size()));
  const int li = logits.id();
  return logits.tape().record(std::move(y), {li}, [li, targets](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& zv = t.value(li);
    Matrix<Scalar> g = zv.unaryExpr(&detail::sigmoid_value<Scalar>) - targets;
    t.accumulate(li, g * (t.grad(self)(0, 0) / static_cast<Scalar>(zv.size())));
  });
}

// ---------------------------------------------------------------------------
// Parameter containers.
// ---------------------------------------------------------------------------

/// Dense affine map x -> x W + b with W stored in x out.
template <typename Scalar>
struct Linear {
  Matrix<Scalar> weight;
  Matrix<Scalar> bias;

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out)
      : weight(Matrix<Scalar>::Zero(in, out)), bias(Matrix<Scalar>::Zero(1, out)) {}

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    return add(matmul(x, tape.parameter(weight)), tape.parameter(bias));
  }

  /// Truncated normal weights, zero bias.
  void init(Rng& rng, double stddev = 0.02) {
    for (Eigen::Index i = 0; i < weight.size(); ++i) {
      weight.data()[i] = static_cast<Scalar>(rng.truncated_normal(stddev));
    }
    bias.setZero();
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
};

/// Gain and bias for layer or group normalization.
template <typename Scalar>
struct Norm {
  Matrix<Scalar> gain;
  Matrix<Scalar> bias;

  Norm() = default;
  explicit Norm(Eigen::Index channels)
      : gain(Matrix<Scalar>::Ones(1, channels)), bias(Matrix<Scalar>::Zero(1, channels)) {}

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    return layer_norm(x, tape.parameter(gain), tape.parameter(bias));
  }
  Tensor<Scalar> grouped(Tape<Scalar>& tape, const Tensor<Scalar>& x, int groups) const {
    return group_norm(x, groups, tape.parameter(gain), tape.parameter(bias));
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + "gain", gain);
    f(prefix + "bias", bias);
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    f(prefix + "gain", gain);
    f(prefix + "bias", bias);
  }
};

template <typename Scalar>
void fill_truncated_normal(Matrix<Scalar>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.truncated_normal(stddev));
}

/// Number of scalar parameters reachable through `module.visit`.
template <typename Module>
std::size_t parameter_count(const Module& module) {
  std::size_t n = 0;
  module.visit([&n](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); }, "");
  return n;
}

}  // namespace msmk
