// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <string>
#include <vector>

namespace msmk {

/// Outcome of one invariant check: `measured` is compared against `limit`
/// (an error bound unless the detail says otherwise).
struct Check {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double limit = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;
  double seconds = 0.0;

  bool passed() const;
};

// Individual checks, all with fixed seeds.
Check check_patch_arithmetic();
Check check_mask_count();
Check check_masked_gradient_zero();
Check check_lti_duality(int instances = 50);
Check check_selective_degeneracy();
Check check_zoh();
Check check_mlstm_stabilizer();
Check check_mlstm_large_gates();
Check check_slstm_stabilizer();
std::vector<Check> check_block_gradients();
std::vector<Check> check_pipeline_gradients();
std::vector<Check> check_causality();
Check check_permutation_equivariance();
Check check_parameter_counts();
Check check_score_fixture();

/// gradcheck, duality, stabilizer, masking.
const std::vector<std::string>& suite_names();
/// Throws ContractError for an unknown suite.
SuiteReport run_suite(const std::string& name);

}  // namespace msmk
