// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "msmk/layers.hpp"
#include "msmk/transformer.hpp"

namespace msmk {

// ---------------------------------------------------------------- sLSTM

/// One scalar sLSTM unit over d inputs. Columns of w, r and b are ordered
/// (z, i, f, o).
template <typename Scalar>
struct SLstmCell {
  Matrix<Scalar> w;  // d x 4
  Matrix<Scalar> r;  // 1 x 4
  Matrix<Scalar> b;  // 1 x 4

  SLstmCell() = default;
  explicit SLstmCell(Eigen::Index d)
      : w(Matrix<Scalar>::Zero(d, 4)), r(Matrix<Scalar>::Zero(1, 4)), b(Matrix<Scalar>::Zero(1, 4)) {}

  void init(Rng& rng, double stddev = 0.02) {
    fill_truncated_normal(w, rng, stddev);
    fill_truncated_normal(r, rng, stddev);
    b.setZero();
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + "w", w);
    f(prefix + "r", r);
    f(prefix + "b", b);
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    f(prefix + "w", w);
    f(prefix + "r", r);
    f(prefix + "b", b);
  }
};

/// Cell, normalizer, hidden and stabilizer states, each 1 x 1.
template <typename Scalar>
struct SLstmState {
  Tensor<Scalar> c, n, h, m;

  static SLstmState zeros(Tape<Scalar>& tape) {
    return {tape.scalar(0), tape.scalar(0), tape.scalar(0), tape.scalar(0)};
  }
};

/// Stabilized step: m_t = max(f~ + m_{t-1}, i~), i' = exp(i~ - m_t),
/// f' = exp(f~ + m_{t-1} - m_t); c = f'c + i'z, n = f'n + i', h = o c / n.
template <typename Scalar>
SLstmState<Scalar> slstm_step(Tape<Scalar>& tape, const SLstmState<Scalar>& s, const Tensor<Scalar>& x,
                              const SLstmCell<Scalar>& cell) {
  Tensor<Scalar> pre = add(add(matmul(x, tape.parameter(cell.w)), mul(tape.parameter(cell.r), s.h)),
                           tape.parameter(cell.b));
  Tensor<Scalar> z = tanh(slice_cols(pre, 0, 1));
  Tensor<Scalar> ig = slice_cols(pre, 1, 1);
  Tensor<Scalar> fg = slice_cols(pre, 2, 1);
  Tensor<Scalar> o = sigmoid(slice_cols(pre, 3, 1));
  Tensor<Scalar> m = maximum(add(fg, s.m), ig);
  Tensor<Scalar> ip = exp(sub(ig, m));
  Tensor<Scalar> fp = exp(sub(add(fg, s.m), m));
  Tensor<Scalar> c = add(mul(fp, s.c), mul(ip, z));
  Tensor<Scalar> n = add(mul(fp, s.n), ip);
  return {c, n, mul(o, div(c, n)), m};
}

// ---------------------------------------------------------------- mLSTM

/// Per-step stabilizer and denominator, exposed for inspection.
struct MLstmTrace {
  std::vector<double> m;            // stabilizer m_t
  std::vector<double> denominator;  // max(|n_t^T q_t|, 1) in the unstabilized frame, as log
};

/// Stabilized mLSTM recurrence for one head.
/// q, k, v: L x d (k already scaled); ig, fg: L x 1 gate preactivations.
/// Returns C_t q_t / max(|n_t^T q_t|, 1) per step, computed in the frame
/// scaled by exp(-m_t), where the floor 1 becomes exp(-m_t).
template <typename Scalar>
Tensor<Scalar> mlstm_cell(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                          const Tensor<Scalar>& ig, const Tensor<Scalar>& fg, MLstmTrace* trace = nullptr) {
  Tape<Scalar>& tape = q.tape();
  for (const auto* t : {&k, &v, &ig, &fg}) tape.check_owned(*t);
  const Eigen::Index L = q.rows(), d = q.cols();
  if (k.shape() != q.shape() || v.shape() != q.shape() || ig.shape() != Shape{L, 1} || fg.shape() != Shape{L, 1}) {
    throw DimensionError("mlstm_cell: q " + q.shape().str() + ", k " + k.shape().str() + ", v " + v.shape().str() +
                         ", i " + ig.shape().str() + ", f " + fg.shape().str());
  }
  const Matrix<double> qv = q.value().template cast<double>(), kv = k.value().template cast<double>(),
                       vv = v.value().template cast<double>();
  const bool keep = tape.any_requires_grad({q.id(), k.id(), v.id(), ig.id(), fg.id()});

  struct Saved {
    std::vector<Matrix<double>> cells;  // C_t
    Matrix<double> norms;               // n_t rows
    Eigen::VectorXd ip, fp, denom, s;
  };
  Saved sv;
  if (keep) {
    sv.cells.reserve(static_cast<std::size_t>(L));
    sv.norms.resize(L, d);
    sv.ip.resize(L);
    sv.fp.resize(L);
    sv.denom.resize(L);
    sv.s.resize(L);
  }
  if (trace) {
    trace->m.clear();
    trace->denominator.clear();
  }

  Matrix<double> C = Matrix<double>::Zero(d, d);
  Eigen::RowVectorXd n = Eigen::RowVectorXd::Zero(d);
  double m = 0.0;
  Matrix<double> h(L, d);
  for (Eigen::Index t = 0; t < L; ++t) {
    const double it = static_cast<double>(ig.value()(t, 0)), ft = static_cast<double>(fg.value()(t, 0));
    const double m_new = std::max(ft + m, it);
    const double ip = std::exp(it - m_new), fp = std::exp(ft + m - m_new);
    C = fp * C + ip * vv.row(t).transpose() * kv.row(t);
    n = fp * n + ip * kv.row(t);
    const double s = n.dot(qv.row(t));
    const double denom = std::max(std::abs(s), std::exp(-m_new));
    h.row(t) = (C * qv.row(t).transpose()).transpose() / denom;
    m = m_new;
    if (keep) {
      sv.cells.push_back(C);
      sv.norms.row(t) = n;
      sv.ip(t) = ip;
      sv.fp(t) = fp;
      sv.denom(t) = denom;
      sv.s(t) = s;
    }
    if (trace) {
      trace->m.push_back(m_new);
      trace->denominator.push_back(std::log(denom) + m_new);
    }
  }

  const int qi = q.id(), ki = k.id(), vi = v.id(), ii = ig.id(), fi = fg.id();
  Matrix<Scalar> out = h.template cast<Scalar>();
  return tape.record(std::move(out), {qi, ki, vi, ii, fi},
                     [=, h = std::move(h), sv = std::move(sv)](Tape<Scalar>& t, int self) {
    const Matrix<double> gy = t.grad(self).template cast<double>();
    Matrix<double> gq(L, d), gk(L, d), gv(L, d), gi(L, 1), gf(L, 1);
    // Adjoints of C_t and n_t, rescaled into the stabilized frame.
    Matrix<double> G = Matrix<double>::Zero(d, d);
    Eigen::RowVectorXd gn = Eigen::RowVectorXd::Zero(d);
    for (Eigen::Index s = L - 1; s >= 0; --s) {
      const auto g = gy.row(s);
      const auto qs = qv.row(s), ks = kv.row(s), vs = vv.row(s);
      const double D = sv.denom(s);
      G += g.transpose() * qs / D;
      gq.row(s) = (sv.cells[s].transpose() * g.transpose()).transpose() / D;
      // When the floor is not the active branch, D = |n^T q| also depends on n and q.
      if (std::abs(sv.s(s)) >= D) {
        const double coef = g.dot(h.row(s)) / D * (sv.s(s) > 0 ? 1.0 : -1.0);
        gn -= coef * qs;
        gq.row(s) -= coef * sv.norms.row(s);
      }
      const Eigen::RowVectorXd Gk = (G * ks.transpose()).transpose();
      gi(s, 0) = sv.ip(s) * (vs.dot(Gk) + gn.dot(ks));
      gv.row(s) = sv.ip(s) * Gk;
      gk.row(s) = sv.ip(s) * ((G.transpose() * vs.transpose()).transpose() + gn);
      if (s > 0) {
        gf(s, 0) = sv.fp(s) * ((G.array() * sv.cells[s - 1].array()).sum() + gn.dot(sv.norms.row(s - 1)));
      } else {
        gf(s, 0) = 0.0;
      }
      G *= sv.fp(s);
      gn *= sv.fp(s);
    }
    t.accumulate(qi, gq.template cast<Scalar>());
    t.accumulate(ki, gk.template cast<Scalar>());
    t.accumulate(vi, gv.template cast<Scalar>());
    t.accumulate(ii, gi.template cast<Scalar>());
    t.accumulate(fi, gf.template cast<Scalar>());
  });
}

/// A single dense mLSTM head at width d.
template <typename Scalar>
struct MLstmHead {
  Linear<Scalar> wq, wk, wv, wo;
  Linear<Scalar> wi, wf;  // d -> 1

  MLstmHead() = default;
  explicit MLstmHead(Eigen::Index d) : wq(d, d), wk(d, d), wv(d, d), wo(d, d), wi(d, 1), wf(d, 1) {}

  void init(Rng& rng, double stddev = 0.02) {
    for (auto* l : {&wq, &wk, &wv, &wo, &wi, &wf}) l->init(rng, stddev);
  }

  /// h_t = o_t * (C_t q_t / max(|n_t^T q_t|, 1)) with k = W_k x / sqrt(d) + b_k.
  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x, MLstmTrace* trace = nullptr) const {
    const Scalar ks = Scalar(1) / std::sqrt(static_cast<Scalar>(wk.weight.cols()));
    Tensor<Scalar> q = wq(tape, x);
    Tensor<Scalar> k = add(scale(matmul(x, tape.parameter(wk.weight)), ks), tape.parameter(wk.bias));
    Tensor<Scalar> v = wv(tape, x);
    Tensor<Scalar> o = sigmoid(wo(tape, x));
    return mul(o, mlstm_cell(q, k, v, wi(tape, x), wf(tape, x), trace));
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    wq.visit(f, prefix + "q.");
    wk.visit(f, prefix + "k.");
    wv.visit(f, prefix + "v.");
    wo.visit(f, prefix + "o.");
    wi.visit(f, prefix + "i.");
    wf.visit(f, prefix + "f.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    wq.visit(f, prefix + "q.");
    wk.visit(f, prefix + "k.");
    wv.visit(f, prefix + "v.");
    wo.visit(f, prefix + "o.");
    wi.visit(f, prefix + "i.");
    wf.visit(f, prefix + "f.");
  }
};

// ---------------------------------------------------------------- ViL

struct ViLConfig {
  Eigen::Index d_enc = 192;
  int layers = 12;
  int expand = 3;
  int heads = 4;
  int d_conv = 4;
  int qkv_block = 4;

  static ViLConfig tiny() { return {192, 12, 3, 4, 4, 4}; }
  static ViLConfig small() { return {384, 12, 3, 4, 4, 4}; }
  static ViLConfig base() { return {768, 12, 3, 4, 4, 4}; }

  Eigen::Index inner() const { return expand * d_enc; }
  Eigen::Index head_dim() const { return inner() / heads; }

  void validate() const {
    if (d_enc <= 0 || expand <= 0 || heads <= 0 || d_conv <= 0 || qkv_block <= 0 || layers < 0) {
      throw ContractError("vil: all sizes must be positive");
    }
    if (inner() % heads != 0 || head_dim() % qkv_block != 0) {
      throw DimensionError("vil: inner width " + std::to_string(inner()) + " must split into " +
                           std::to_string(heads) + " heads of a multiple of " + std::to_string(qkv_block));
    }
  }
};

/// Pre-norm ViL block with mLSTM heads: up-project to (u, g), causal conv +
/// silu on u, headwise q/k (conv branch) and v (pre-conv branch), per-head
/// mLSTM, group norm over heads, gate by silu(g), down-project, residual.
template <typename Scalar>
struct ViLBlock {
  Norm<Scalar> norm;
  Linear<Scalar> up;  // d -> 2D
  Matrix<Scalar> conv_kernel, conv_bias;
  Matrix<Scalar> wq, wk, wv, wo;  // D x block, block-diagonal
  Matrix<Scalar> bq, bk, bv, bo;  // 1 x D
  Linear<Scalar> gate_i, gate_f;  // D -> heads
  Norm<Scalar> head_norm;
  Linear<Scalar> down;
  int heads = 1;

  ViLBlock() = default;
  explicit ViLBlock(const ViLConfig& cfg)
      : norm(cfg.d_enc),
        up(cfg.d_enc, 2 * cfg.inner()),
        conv_kernel(Matrix<Scalar>::Zero(cfg.d_conv, cfg.inner())),
        conv_bias(Matrix<Scalar>::Zero(1, cfg.inner())),
        wq(Matrix<Scalar>::Zero(cfg.inner(), cfg.qkv_block)),
        wk(wq),
        wv(wq),
        wo(wq),
        bq(Matrix<Scalar>::Zero(1, cfg.inner())),
        bk(bq),
        bv(bq),
        bo(bq),
        gate_i(cfg.inner(), cfg.heads),
        gate_f(cfg.inner(), cfg.heads),
        head_norm(cfg.inner()),
        down(cfg.inner(), cfg.d_enc),
        heads(cfg.heads) {}

  Eigen::Index inner() const { return conv_kernel.cols(); }
  Eigen::Index head_dim() const { return inner() / heads; }

  void init(Rng& rng, double stddev = 0.02) {
    up.init(rng, stddev);
    const double bound = 1.0 / std::sqrt(static_cast<double>(conv_kernel.rows()));
    for (Eigen::Index i = 0; i < conv_kernel.size(); ++i) {
      conv_kernel.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    const double block_std = std::sqrt(2.0 / (5.0 * static_cast<double>(wq.cols())));
    for (auto* w : {&wq, &wk, &wv, &wo}) fill_truncated_normal(*w, rng, block_std);
    gate_i.init(rng, stddev);
    gate_f.init(rng, stddev);
    down.init(rng, stddev);
  }

  /// Concatenated per-head outputs o * h~ before the group norm.
  Tensor<Scalar> heads_output(Tape<Scalar>& tape, const Tensor<Scalar>& u, const Tensor<Scalar>& uc) const {
    const Eigen::Index dh = head_dim();
    const Scalar ks = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    Tensor<Scalar> q = add(headwise_linear(uc, tape.parameter(wq)), tape.parameter(bq));
    Tensor<Scalar> k = add(scale(headwise_linear(uc, tape.parameter(wk)), ks), tape.parameter(bk));
    Tensor<Scalar> v = add(headwise_linear(u, tape.parameter(wv)), tape.parameter(bv));
    Tensor<Scalar> o = sigmoid(add(headwise_linear(uc, tape.parameter(wo)), tape.parameter(bo)));
    Tensor<Scalar> ig = gate_i(tape, uc), fg = gate_f(tape, uc);
    std::vector<Tensor<Scalar>> parts;
    for (int j = 0; j < heads; ++j) {
      parts.push_back(mlstm_cell(slice_cols(q, j * dh, dh), slice_cols(k, j * dh, dh), slice_cols(v, j * dh, dh),
                                 slice_cols(ig, j, 1), slice_cols(fg, j, 1)));
    }
    return mul(o, heads == 1 ? parts[0] : concat_cols(parts));
  }

  struct Branches {
    Tensor<Scalar> u, uc, g;
  };

  Branches branches(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    Tensor<Scalar> p = up(tape, norm(tape, x));
    Tensor<Scalar> u = slice_cols(p, 0, inner());
    Tensor<Scalar> g = slice_cols(p, inner(), inner());
    Tensor<Scalar> uc =
        silu(add(causal_depthwise_conv1d(u, tape.parameter(conv_kernel)), tape.parameter(conv_bias)));
    return {u, uc, g};
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    auto br = branches(tape, x);
    Tensor<Scalar> h = head_norm.grouped(tape, heads_output(tape, br.u, br.uc), heads);
    return add(x, down(tape, mul(h, silu(br.g))));
  }

  void zero_output_projections() {
    down.weight.setZero();
    down.bias.setZero();
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    visit_impl(*this, f, prefix);
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    visit_impl(*this, f, prefix);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F&& f, const std::string& prefix) {
    s.norm.visit(f, prefix + "norm.");
    s.up.visit(f, prefix + "up.");
    f(prefix + "conv.weight", s.conv_kernel);
    f(prefix + "conv.bias", s.conv_bias);
    f(prefix + "q.weight", s.wq);
    f(prefix + "q.bias", s.bq);
    f(prefix + "k.weight", s.wk);
    f(prefix + "k.bias", s.bk);
    f(prefix + "v.weight", s.wv);
    f(prefix + "v.bias", s.bv);
    f(prefix + "o.weight", s.wo);
    f(prefix + "o.bias", s.bo);
    s.gate_i.visit(f, prefix + "gate_i.");
    s.gate_f.visit(f, prefix + "gate_f.");
    s.head_norm.visit(f, prefix + "head_norm.");
    s.down.visit(f, prefix + "down.");
  }
};

template <typename Scalar>
using ViLEncoder = Encoder<ViLBlock<Scalar>, Scalar>;

template <typename Scalar>
ViLEncoder<Scalar> make_vil(const ViLConfig& cfg) {
  cfg.validate();
  return ViLEncoder<Scalar>(cfg, cfg.d_enc, cfg.layers);
}

}  // namespace msmk
