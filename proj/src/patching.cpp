// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace msmk {

Matrix<double> sinusoidal_table(Eigen::Index rows, Eigen::Index d) {
  if (rows <= 0 || d <= 0) throw DimensionError("sinusoidal_table: empty table requested");
  Matrix<double> table(rows, d);
  for (Eigen::Index p = 0; p < rows; ++p) {
    for (Eigen::Index i = 0; 2 * i < d; ++i) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(2 * i) / d);
      table(p, 2 * i) = std::sin(angle);
      if (2 * i + 1 < d) table(p, 2 * i + 1) = std::cos(angle);
    }
  }
  return table;
}

MaskStrategy parse_mask_strategy(const std::string& name) {
  if (name == "unstructured") return MaskStrategy::Unstructured;
  if (name == "block") return MaskStrategy::Block;
  throw ContractError("unknown mask strategy '" + name + "' (expected unstructured or block)");
}

std::string to_string(MaskStrategy s) { return s == MaskStrategy::Block ? "block" : "unstructured"; }

Eigen::Index mask_quota(Eigen::Index num_patches, double ratio) {
  return static_cast<Eigen::Index>(std::lround(ratio * static_cast<double>(num_patches)));
}

MaskPlan make_mask(Eigen::Index num_patches, double ratio, MaskStrategy strategy, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ContractError("make_mask: ratio " + std::to_string(ratio) + " outside (0, 1)");
  }
  const Eigen::Index quota = mask_quota(num_patches, ratio);
  if (quota <= 0 || quota >= num_patches) {
    throw DegenerateMaskError("make_mask: ratio " + std::to_string(ratio) + " over " + std::to_string(num_patches) +
                              " patches masks " + std::to_string(quota) + " of them");
  }
  Rng rng(seed);
  MaskPlan plan;
  plan.ratio = ratio;
  plan.strategy = strategy;
  plan.num_patches = num_patches;

  if (strategy == MaskStrategy::Unstructured) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(num_patches));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (Eigen::Index i = 0; i < quota; ++i) {
      const auto j = i + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(num_patches - i)));
      std::swap(idx[i], idx[j]);
    }
    plan.masked.assign(idx.begin(), idx.begin() + quota);
  } else {
    std::vector<char> hit(static_cast<std::size_t>(num_patches), 0);
    std::vector<Eigen::Index> starts;
    Eigen::Index taken = 0;
    while (taken < quota) {
      const Eigen::Index run = std::min(kBlockRun, quota - taken);
      // Starts with a full run of free patches; once the free space is too
      // fragmented, any free patch (its run stops at the next masked one).
      starts.clear();
      Eigen::Index free_len = 0;
      for (Eigen::Index i = num_patches - 1; i >= 0; --i) {
        free_len = hit[i] ? 0 : free_len + 1;
        if (free_len >= run) starts.push_back(i);
      }
      if (starts.empty()) {
        for (Eigen::Index i = 0; i < num_patches; ++i) {
          if (!hit[i]) starts.push_back(i);
        }
      }
      std::sort(starts.begin(), starts.end());
      Eigen::Index i = starts[rng.below(starts.size())];
      for (Eigen::Index k = 0; k < run && i < num_patches && !hit[i]; ++k, ++i) {
        hit[i] = 1;
        ++taken;
      }
    }
    for (Eigen::Index i = 0; i < num_patches; ++i) {
      if (hit[i]) plan.masked.push_back(i);
    }
  }
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

}  // namespace msmk
