// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "msmk/layers.hpp"
#include "msmk/transformer.hpp"

namespace msmk {

namespace detail {

/// (exp(x) - 1) / x with its limit 1 near zero.
inline double expm1_ratio(double x) { return std::abs(x) < 1e-6 ? 1.0 : std::expm1(x) / x; }

/// d/dx of expm1_ratio.
inline double expm1_ratio_deriv(double x) {
  if (std::abs(x) < 1e-3) return 0.5 + x / 3.0 + x * x / 8.0;
  return (x * std::exp(x) - std::expm1(x)) / (x * x);
}

}  // namespace detail

/// Zero-order hold for a diagonal A: Abar = exp(delta a), Bbar = ((exp(delta a) - 1) / a) b,
/// falling back to delta * b when |delta a| < 1e-6.
template <typename Scalar>
std::pair<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>, Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> zoh_discretize(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& a, const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& b,
    Scalar delta) {
  if (a.size() != b.size()) throw DimensionError("zoh_discretize: A and B differ in state size");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> abar(a.size()), bbar(a.size());
  for (Eigen::Index n = 0; n < a.size(); ++n) {
    const double x = static_cast<double>(delta) * static_cast<double>(a(n));
    abar(n) = static_cast<Scalar>(std::exp(x));
    bbar(n) = static_cast<Scalar>(static_cast<double>(delta) * detail::expm1_ratio(x) * static_cast<double>(b(n)));
  }
  return {abar, bbar};
}

/// Recurrent form of a single-channel LTI SSM: h_t = Abar h_{t-1} + Bbar x_t,
/// y_t = C h_t + skip x_t, h_0 = 0.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lti_scan(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& abar,
                                                  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& bbar,
                                                  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& c,
                                                  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x, Scalar skip = 0) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> h = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(abar.size());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> y(x.size());
  for (Eigen::Index t = 0; t < x.size(); ++t) {
    h = abar.cwiseProduct(h) + bbar * x(t);
    y(t) = c.dot(h) + skip * x(t);
  }
  return y;
}

/// The kernel (C Bbar, C Abar Bbar, ..., C Abar^{L-1} Bbar).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lti_kernel(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& abar,
                                                    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& bbar,
                                                    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& c, Eigen::Index length) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> k(length);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> p = bbar;
  for (Eigen::Index j = 0; j < length; ++j) {
    k(j) = c.dot(p);
    p = abar.cwiseProduct(p);
  }
  return k;
}

/// Convolutional form: causal convolution of x with the materialized kernel.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lti_conv(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& abar,
                                                  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& bbar,
                                                  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& c,
                                                  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x, Scalar skip = 0) {
  const auto k = lti_kernel(abar, bbar, c, x.size());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> y(x.size());
  for (Eigen::Index t = 0; t < x.size(); ++t) {
    accum_t<Scalar> acc = 0;
    for (Eigen::Index j = 0; j <= t; ++j) acc += static_cast<accum_t<Scalar>>(k(j)) * x(t - j);
    y(t) = static_cast<Scalar>(acc) + skip * x(t);
  }
  return y;
}

/// Selective scan over L steps and D channels with N states per channel.
/// x, delta: L x D; a: D x N (negative); b, c: L x N; skip: 1 x D.
/// y_{t,d} = sum_n c_{t,n} h_{t,d,n} + skip_d x_{t,d}, where h follows the
/// ZOH recurrence with (a_{d,n}, b_{t,n}, delta_{t,d}).
template <typename Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& x, const Tensor<Scalar>& delta, const Tensor<Scalar>& a,
                              const Tensor<Scalar>& b, const Tensor<Scalar>& c, const Tensor<Scalar>& skip) {
  Tape<Scalar>& tape = x.tape();
  for (const auto* t : {&delta, &a, &b, &c, &skip}) tape.check_owned(*t);
  const Eigen::Index L = x.rows(), D = x.cols(), N = a.cols();
  if (delta.shape() != x.shape() || a.shape() != Shape{D, N} || b.shape() != Shape{L, N} ||
      c.shape() != Shape{L, N} || skip.shape() != Shape{1, D}) {
    throw DimensionError("selective_scan: x " + x.shape().str() + ", delta " + delta.shape().str() + ", A " +
                         a.shape().str() + ", B " + b.shape().str() + ", C " + c.shape().str() + ", skip " +
                         skip.shape().str());
  }
  const Matrix<double> xv = x.value().template cast<double>(), dv = delta.value().template cast<double>(),
                       av = a.value().template cast<double>(), bv = b.value().template cast<double>(),
                       cv = c.value().template cast<double>(), sv = skip.value().template cast<double>();
  const bool keep = tape.any_requires_grad({x.id(), delta.id(), a.id(), b.id(), c.id(), skip.id()});

  // Row t, column d*N + n: state after step t, Abar and expm1(z)/z at step t.
  // Kept only when a backward pass can follow.
  Matrix<double> hs, abars, phis;
  if (keep) {
    hs.resize(L, D * N);
    abars.resize(L, D * N);
    phis.resize(L, D * N);
  }
  Matrix<double> y(L, D);
  std::vector<double> h(static_cast<std::size_t>(N));
  for (Eigen::Index d = 0; d < D; ++d) {
    std::fill(h.begin(), h.end(), 0.0);
    for (Eigen::Index t = 0; t < L; ++t) {
      const double dt = dv(t, d), xt = xv(t, d);
      double acc = 0;
      for (Eigen::Index n = 0; n < N; ++n) {
        const double z = dt * av(d, n);
        const double em = std::expm1(z);
        const double phi = std::abs(z) < 1e-6 ? 1.0 : em / z;
        h[n] = (em + 1.0) * h[n] + dt * phi * bv(t, n) * xt;
        acc += cv(t, n) * h[n];
        if (keep) {
          hs(t, d * N + n) = h[n];
          abars(t, d * N + n) = em + 1.0;
          phis(t, d * N + n) = phi;
        }
      }
      y(t, d) = acc + sv(0, d) * xt;
    }
  }

  const int xi = x.id(), di = delta.id(), ai = a.id(), bi = b.id(), ci = c.id(), si = skip.id();
  return tape.record(y.template cast<Scalar>(), {xi, di, ai, bi, ci, si},
                     [=, hs = std::move(hs), abars = std::move(abars), phis = std::move(phis)](Tape<Scalar>& t,
                                                                                                   int self) {
    const Matrix<double> gy = t.grad(self).template cast<double>();
    Matrix<double> gx = Matrix<double>::Zero(L, D), gd = Matrix<double>::Zero(L, D), ga = Matrix<double>::Zero(D, N),
                   gb = Matrix<double>::Zero(L, N), gc = Matrix<double>::Zero(L, N), gs = Matrix<double>::Zero(1, D);
    std::vector<double> gh(static_cast<std::size_t>(N));
    for (Eigen::Index d = 0; d < D; ++d) {
      std::fill(gh.begin(), gh.end(), 0.0);
      for (Eigen::Index s = L - 1; s >= 0; --s) {
        const double dt = dv(s, d), xt = xv(s, d), g = gy(s, d);
        gs(0, d) += g * xt;
        gx(s, d) += g * sv(0, d);
        for (Eigen::Index n = 0; n < N; ++n) {
          const Eigen::Index k = d * N + n;
          const double h_prev = s > 0 ? hs(s - 1, k) : 0.0;
          const double an = av(d, n), z = dt * an, abar = abars(s, k), phi = phis(s, k);
          // Adjoint of h_s: readout at s plus the carry from s+1.
          if (s + 1 < L) gh[n] *= abars(s + 1, k);
          gh[n] += cv(s, n) * g;
          gc(s, n) += g * hs(s, k);
          const double e = dt * phi;
          const double g_abar = gh[n] * h_prev, g_e = gh[n] * bv(s, n) * xt;
          gb(s, n) += gh[n] * e * xt;
          gx(s, d) += gh[n] * e * bv(s, n);
          const bool small = std::abs(z) < 1e-6;
          const double de_ddt = small ? 1.0 : abar;
          const double dphi = std::abs(z) < 1e-3 ? detail::expm1_ratio_deriv(z) : (abar - phi) / z;
          gd(s, d) += g_abar * an * abar + g_e * de_ddt;
          ga(d, n) += g_abar * dt * abar + g_e * dt * dt * dphi;
        }
      }
    }
    t.accumulate(xi, gx.template cast<Scalar>());
    t.accumulate(di, gd.template cast<Scalar>());
    t.accumulate(ai, ga.template cast<Scalar>());
    t.accumulate(bi, gb.template cast<Scalar>());
    t.accumulate(ci, gc.template cast<Scalar>());
    t.accumulate(si, gs.template cast<Scalar>());
  });
}

struct MambaConfig {
  Eigen::Index d_enc = 192;
  int layers = 12;
  int expand = 3;
  int d_state = 24;
  int d_conv = 4;

  static MambaConfig tiny() { return {192, 12, 3, 24, 4}; }
  static MambaConfig small() { return {384, 12, 3, 24, 4}; }
  static MambaConfig base() { return {768, 12, 3, 24, 4}; }

  Eigen::Index inner() const { return expand * d_enc; }

  void validate() const {
    if (d_enc <= 0 || expand <= 0 || d_state <= 0 || d_conv <= 0 || layers < 0) {
      throw ContractError("mamba: all sizes must be positive");
    }
  }
};

/// Selection maps and the diagonal state matrix of one SSM at width D.
template <typename Scalar>
struct SsmParams {
  Matrix<Scalar> a_log;    // D x N, A = -exp(a_log)
  Matrix<Scalar> delta_p;  // 1 x D, pre-softplus bias
  Linear<Scalar> s_b;      // D -> N
  Linear<Scalar> s_c;      // D -> N
  Linear<Scalar> s_delta;  // D -> 1, broadcast over channels
  Matrix<Scalar> skip;     // 1 x D

  SsmParams() = default;
  SsmParams(Eigen::Index d, Eigen::Index n)
      : a_log(d, n), delta_p(1, d), s_b(d, n), s_c(d, n), s_delta(d, 1), skip(Matrix<Scalar>::Ones(1, d)) {
    for (Eigen::Index j = 0; j < n; ++j) a_log.col(j).setConstant(static_cast<Scalar>(std::log(j + 1.0)));
    delta_p.setConstant(static_cast<Scalar>(std::log(std::expm1(0.01))));
  }

  /// Linear maps truncated normal; softplus(delta_p) log-uniform in [1e-3, 0.1].
  void init(Rng& rng, double stddev = 0.02) {
    s_b.init(rng, stddev);
    s_c.init(rng, stddev);
    s_delta.init(rng, stddev);
    for (Eigen::Index i = 0; i < delta_p.cols(); ++i) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
      delta_p(0, i) = static_cast<Scalar>(std::log(std::expm1(dt)));
    }
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + "a_log", a_log);
    f(prefix + "delta_p", delta_p);
    s_b.visit(f, prefix + "s_b.");
    s_c.visit(f, prefix + "s_c.");
    s_delta.visit(f, prefix + "s_delta.");
    f(prefix + "skip", skip);
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    f(prefix + "a_log", a_log);
    f(prefix + "delta_p", delta_p);
    s_b.visit(f, prefix + "s_b.");
    s_c.visit(f, prefix + "s_c.");
    s_delta.visit(f, prefix + "s_delta.");
    f(prefix + "skip", skip);
  }
};

template <typename Scalar>
struct SelectiveParams {
  Tensor<Scalar> b;      // L x N
  Tensor<Scalar> c;      // L x N
  Tensor<Scalar> delta;  // L x D
};

/// B_t = s_B(x), C_t = s_C(x), delta_t = softplus(delta_p + s_delta(x)).
template <typename Scalar>
SelectiveParams<Scalar> selective_params(Tape<Scalar>& tape, const Tensor<Scalar>& x, const SsmParams<Scalar>& p) {
  if (x.cols() != p.a_log.rows()) {
    throw DimensionError("selective_params: input " + x.shape().str() + " vs SSM width " +
                         std::to_string(p.a_log.rows()));
  }
  Tensor<Scalar> sd = expand(p.s_delta(tape, x), x.rows(), x.cols());
  return {p.s_b(tape, x), p.s_c(tape, x), softplus(add(sd, tape.parameter(p.delta_p)))};
}

/// selective_params followed by selective_scan.
template <typename Scalar>
Tensor<Scalar> ssm_forward(Tape<Scalar>& tape, const Tensor<Scalar>& x, const SsmParams<Scalar>& p) {
  auto sel = selective_params(tape, x, p);
  Tensor<Scalar> a = -exp(tape.parameter(p.a_log));
  return selective_scan(x, sel.delta, a, sel.b, sel.c, tape.parameter(p.skip));
}

/// Pre-norm Mamba block: x + out_proj(ssm(silu(conv(u))) * silu(g)).
template <typename Scalar>
struct MambaBlock {
  Norm<Scalar> norm;
  Linear<Scalar> in_proj;  // d -> 2D, main then gate
  Matrix<Scalar> conv_kernel;
  Matrix<Scalar> conv_bias;
  SsmParams<Scalar> ssm;
  Linear<Scalar> out_proj;

  MambaBlock() = default;
  explicit MambaBlock(const MambaConfig& cfg)
      : norm(cfg.d_enc),
        in_proj(cfg.d_enc, 2 * cfg.inner()),
        conv_kernel(Matrix<Scalar>::Zero(cfg.d_conv, cfg.inner())),
        conv_bias(Matrix<Scalar>::Zero(1, cfg.inner())),
        ssm(cfg.inner(), cfg.d_state),
        out_proj(cfg.inner(), cfg.d_enc) {}

  Eigen::Index inner() const { return conv_kernel.cols(); }

  void init(Rng& rng, double stddev = 0.02) {
    in_proj.init(rng, stddev);
    const double bound = 1.0 / std::sqrt(static_cast<double>(conv_kernel.rows()));
    for (Eigen::Index i = 0; i < conv_kernel.size(); ++i) {
      conv_kernel.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    conv_bias.setZero();
    ssm.init(rng, stddev);
    out_proj.init(rng, stddev);
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    Tensor<Scalar> p = in_proj(tape, norm(tape, x));
    Tensor<Scalar> u = slice_cols(p, 0, inner());
    Tensor<Scalar> g = slice_cols(p, inner(), inner());
    u = silu(add(causal_depthwise_conv1d(u, tape.parameter(conv_kernel)), tape.parameter(conv_bias)));
    Tensor<Scalar> y = ssm_forward(tape, u, ssm);
    return add(x, out_proj(tape, mul(y, silu(g))));
  }

  void zero_output_projections() {
    out_proj.weight.setZero();
    out_proj.bias.setZero();
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    norm.visit(f, prefix + "norm.");
    in_proj.visit(f, prefix + "in_proj.");
    f(prefix + "conv.weight", conv_kernel);
    f(prefix + "conv.bias", conv_bias);
    ssm.visit(f, prefix + "ssm.");
    out_proj.visit(f, prefix + "out_proj.");
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    norm.visit(f, prefix + "norm.");
    in_proj.visit(f, prefix + "in_proj.");
    f(prefix + "conv.weight", conv_kernel);
    f(prefix + "conv.bias", conv_bias);
    ssm.visit(f, prefix + "ssm.");
    out_proj.visit(f, prefix + "out_proj.");
  }
};

template <typename Scalar>
using MambaEncoder = Encoder<MambaBlock<Scalar>, Scalar>;

template <typename Scalar>
MambaEncoder<Scalar> make_mamba(const MambaConfig& cfg) {
  cfg.validate();
  return MambaEncoder<Scalar>(cfg, cfg.d_enc, cfg.layers);
}

}  // namespace msmk
