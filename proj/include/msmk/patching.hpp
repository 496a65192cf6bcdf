// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msmk/errors.hpp"
#include "msmk/layers.hpp"
#include "msmk/random.hpp"
#include "msmk/tensor.hpp"

namespace msmk {

struct PatchGrid {
  Eigen::Index rows_time = 0;
  Eigen::Index rows_freq = 0;
  Eigen::Index t = 0;
  Eigen::Index f = 0;

  Eigen::Index count() const { return rows_time * rows_freq; }
  Eigen::Index width() const { return t * f; }
  bool operator==(const PatchGrid&) const = default;
};

/// N x (t*f) raw patches, time-major then frequency; each row is its t x f
/// block flattened time-major.
template <typename Scalar>
struct PatchSet {
  Matrix<Scalar> x_p;
  PatchGrid grid;
};

/// Splits a T x F spectrogram into non-overlapping t x f patches. Trailing
/// frames beyond a multiple of t are dropped; F must be a multiple of f.
template <typename Scalar>
PatchSet<Scalar> patchify(const Matrix<Scalar>& frames, Eigen::Index t, Eigen::Index f) {
  const Eigen::Index T = frames.rows(), F = frames.cols();
  if (t <= 0 || f <= 0 || t > T || f > F) {
    throw DimensionError("patchify: patch " + std::to_string(t) + "x" + std::to_string(f) +
                         " does not fit spectrogram [" + std::to_string(T) + "x" + std::to_string(F) + "]");
  }
  if (F % f != 0) {
    throw DimensionError("patchify: " + std::to_string(F) + " mel bins are not divisible by f=" + std::to_string(f));
  }
  PatchSet<Scalar> ps;
  ps.grid = {T / t, F / f, t, f};
  ps.x_p.resize(ps.grid.count(), t * f);
  for (Eigen::Index i = 0; i < ps.grid.rows_time; ++i) {
    for (Eigen::Index j = 0; j < ps.grid.rows_freq; ++j) {
      const Eigen::Index n = i * ps.grid.rows_freq + j;
      for (Eigen::Index a = 0; a < t; ++a) ps.x_p.row(n).segment(a * f, f) = frames.row(i * t + a).segment(j * f, f);
    }
  }
  return ps;
}

/// Inverse of patchify over the retained frames.
template <typename Scalar>
Matrix<Scalar> unpatchify(const Matrix<Scalar>& x_p, const PatchGrid& grid) {
  if (x_p.rows() != grid.count() || x_p.cols() != grid.width()) {
    throw DimensionError("unpatchify: patches " + shape_of(x_p).str() + " do not match grid of " +
                         std::to_string(grid.count()) + " patches of width " + std::to_string(grid.width()));
  }
  Matrix<Scalar> frames(grid.rows_time * grid.t, grid.rows_freq * grid.f);
  for (Eigen::Index i = 0; i < grid.rows_time; ++i) {
    for (Eigen::Index j = 0; j < grid.rows_freq; ++j) {
      const Eigen::Index n = i * grid.rows_freq + j;
      for (Eigen::Index a = 0; a < grid.t; ++a) {
        frames.row(i * grid.t + a).segment(j * grid.f, grid.f) = x_p.row(n).segment(a * grid.f, grid.f);
      }
    }
  }
  return frames;
}

template <typename Scalar>
Matrix<Scalar> unpatchify(const PatchSet<Scalar>& ps) {
  return unpatchify(ps.x_p, ps.grid);
}

/// Fixed sinusoidal table, interleaved: column 2i is sin(p / 10000^(2i/d)),
/// column 2i+1 the matching cos.
Matrix<double> sinusoidal_table(Eigen::Index rows, Eigen::Index d);

enum class MaskStrategy { Unstructured, Block };

MaskStrategy parse_mask_strategy(const std::string& name);
std::string to_string(MaskStrategy s);

/// Patch indices to hide, strictly increasing.
struct MaskPlan {
  std::vector<Eigen::Index> masked;
  double ratio = 0.0;
  MaskStrategy strategy = MaskStrategy::Unstructured;
  Eigen::Index num_patches = 0;
};

/// Number of patches masked for N patches at ratio m_r.
Eigen::Index mask_quota(Eigen::Index num_patches, double ratio);

/// Unstructured: uniform sample without replacement. Block: runs of up to
/// kBlockRun consecutive patch indices (flattened time-major order) starting
/// at random unmasked positions, until the quota is met.
MaskPlan make_mask(Eigen::Index num_patches, double ratio, MaskStrategy strategy, std::uint64_t seed);

inline constexpr Eigen::Index kBlockRun = 5;

/// Patch projection plus the cls and mask tokens.
template <typename Scalar>
struct Embedding {
  Linear<Scalar> projection;
  Matrix<Scalar> cls_token;
  Matrix<Scalar> mask_token;

  Embedding() = default;
  Embedding(Eigen::Index patch_width, Eigen::Index d_enc)
      : projection(patch_width, d_enc),
        cls_token(Matrix<Scalar>::Zero(1, d_enc)),
        mask_token(Matrix<Scalar>::Zero(1, d_enc)) {}

  Eigen::Index dim() const { return projection.weight.cols(); }

  void init(Rng& rng) {
    projection.init(rng);
    fill_truncated_normal(cls_token, rng, 0.02);
    fill_truncated_normal(mask_token, rng, 0.02);
  }

  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    projection.visit(f, prefix + "proj.");
    f(prefix + "cls", cls_token);
    f(prefix + "mask", mask_token);
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) const {
    projection.visit(f, prefix + "proj.");
    f(prefix + "cls", cls_token);
    f(prefix + "mask", mask_token);
  }
};

/// Rows of the (N+1) x d table used by a sequence; cls owns row 0 and patch n
/// row n+1 whether or not cls is present.
template <typename Scalar>
Matrix<Scalar> positions_for(Eigen::Index num_patches, Eigen::Index d, bool use_cls) {
  const Matrix<double> table = sinusoidal_table(num_patches + 1, d);
  return (use_cls ? table : Matrix<double>(table.bottomRows(num_patches))).template cast<Scalar>();
}

/// x_p W + b, cls prepended when requested, positional table added.
template <typename Scalar>
Tensor<Scalar> embed(Tape<Scalar>& tape, const Matrix<Scalar>& x_p, const Embedding<Scalar>& params, bool use_cls) {
  if (x_p.cols() != params.projection.weight.rows()) {
    throw DimensionError("embed: patches " + shape_of(x_p).str() + " vs projection " +
                         shape_of(params.projection.weight).str());
  }
  Tensor<Scalar> x = params.projection(tape, tape.constant(x_p));
  if (use_cls) x = concat_rows<Scalar>({tape.parameter(params.cls_token), x});
  return add(x, tape.constant(positions_for<Scalar>(x_p.rows(), params.dim(), use_cls)));
}

/// Replaces `rows` of x by token + addend.row(r); other rows pass through
/// unchanged, bit for bit.
template <typename Scalar>
Tensor<Scalar> replace_rows(const Tensor<Scalar>& x, const std::vector<Eigen::Index>& rows, const Tensor<Scalar>& token,
                            const Matrix<Scalar>& addend) {
  Tape<Scalar>& tape = detail::same_tape(x, token);
  if (token.shape() != Shape{1, x.cols()} || shape_of(addend) != x.shape()) {
    throw DimensionError("replace_rows: x " + x.shape().str() + ", token " + token.shape().str() + ", addend " +
                         shape_of(addend).str());
  }
  Matrix<Scalar> y = x.value();
  for (Eigen::Index r : rows) {
    if (r < 0 || r >= x.rows()) {
      throw ContractError("replace_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(x.rows()) + ")");
    }
    y.row(r) = token.value().row(0) + addend.row(r);
  }
  const int xi = x.id(), ti = token.id();
  return tape.record(std::move(y), {xi, ti}, [xi, ti, rows](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.grad(self);
    if (t.needs_grad(xi)) {
      Matrix<Scalar> gx = g;
      for (Eigen::Index r : rows) gx.row(r).setZero();
      t.accumulate(xi, gx);
    }
    if (t.needs_grad(ti)) {
      Matrix<accum_t<Scalar>> gt = Matrix<accum_t<Scalar>>::Zero(1, g.cols());
      for (Eigen::Index r : rows) gt += g.row(r).template cast<accum_t<Scalar>>();
      t.accumulate(ti, gt.template cast<Scalar>());
    }
  });
}

/// Sequence rows hidden by `plan` (shifted past cls when present).
inline std::vector<Eigen::Index> masked_rows(const MaskPlan& plan, bool use_cls) {
  std::vector<Eigen::Index> rows(plan.masked);
  if (use_cls) {
    for (auto& r : rows) ++r;
  }
  return rows;
}

/// SSAST-style substitution: masked rows become mask_token + their positional
/// row. Sequence length is unchanged.
template <typename Scalar>
Tensor<Scalar> apply_mask_tokens(Tape<Scalar>& tape, const Tensor<Scalar>& x_e, const MaskPlan& plan,
                                 const Embedding<Scalar>& params, bool use_cls) {
  const Eigen::Index n = x_e.rows() - (use_cls ? 1 : 0);
  for (Eigen::Index i : plan.masked) {
    if (i < 0 || i >= n) {
      throw ContractError("apply_mask_tokens: patch index " + std::to_string(i) + " outside [0, " +
                          std::to_string(n) + ")");
    }
  }
  if (plan.masked.empty()) return x_e;
  return replace_rows(x_e, masked_rows(plan, use_cls), tape.parameter(params.mask_token),
                      positions_for<Scalar>(n, x_e.cols(), use_cls));
}

}  // namespace msmk
