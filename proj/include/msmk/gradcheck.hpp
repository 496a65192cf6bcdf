// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "msmk/random.hpp"
#include "msmk/tensor.hpp"

namespace msmk {

struct GradCheckOptions {
  double step = 1e-3;
  /// Entries sampled per parameter; parameters at or below this size are checked exhaustively.
  std::size_t max_entries = 48;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t entries_checked = 0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

/// Compares tape gradients against central finite differences.
///
/// `loss(tape)` must build a scalar loss, binding every checked parameter with
/// tape.parameter(). The relative error of a parameter is
/// |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-8) over the
/// checked entries; the report carries the worst parameter.
template <typename LossFn>
GradCheckReport check_gradients(const std::vector<std::pair<std::string, Matrix<double>*>>& params,
                                LossFn&& loss, const GradCheckOptions& opts = {}) {
  std::vector<Matrix<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> l = loss(tape);
    tape.backward(l);
    for (const auto& [name, p] : params) {
      const Matrix<double>* g = tape.grad_of(*p);
      analytic.push_back(g ? *g : Matrix<double>::Zero(p->rows(), p->cols()));
    }
  }
  auto eval = [&loss]() {
    Tape<double> tape;
    return loss(tape).item();
  };

  GradCheckReport report;
  Rng rng(opts.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix<double>& p = *params[pi].second;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(p.size()));
    for (Eigen::Index i = 0; i < p.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    if (idx.size() > opts.max_entries) {
      for (std::size_t i = 0; i < opts.max_entries; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      }
      idx.resize(opts.max_entries);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (Eigen::Index i : idx) {
      const double orig = p.data()[i];
      p.data()[i] = orig + opts.step;
      const double up = eval();
      p.data()[i] = orig - opts.step;
      const double down = eval();
      p.data()[i] = orig;
      const double numeric = (up - down) / (2 * opts.step);
      const double a = analytic[pi].data()[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    report.entries_checked += idx.size();
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst = params[pi].first;
    }
  }
  return report;
}

/// Collects (name, pointer) pairs from a module's visit().
template <typename Module>
std::vector<std::pair<std::string, Matrix<double>*>> collect_parameters(Module& module) {
  std::vector<std::pair<std::string, Matrix<double>*>> out;
  module.visit([&out](const std::string& name, Matrix<double>& m) { out.emplace_back(name, &m); }, "");
  return out;
}

}  // namespace msmk
