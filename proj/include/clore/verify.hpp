#pragma once

#include <functional>
#include <string>
#include <vector>

#include "clore/augment.hpp"
#include "clore/objectives.hpp"
#include "clore/policy.hpp"
#include "clore/rng.hpp"
#include "clore/synth_env.hpp"

namespace clore {

// Synthesizes a reward-1 trajectory for `problem` with random filler before
// and after the answer span: digits, operators, noise tokens, and sometimes
// a duplicated block, so the rule-based editor has something to remove.
Trajectory make_random_correct_trajectory(Rng& rng, const Problem& problem);

// Central-difference gradient of a scalar loss in the parameters; step h.
std::vector<double> finite_difference_gradient(const PolicyParams& params,
                                               const std::function<double(const PolicyParams&)>& loss,
                                               double step = 1e-5);

// max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-4); the floor
// keeps entries below the finite-difference noise floor from dominating.
double max_relative_error(std::span<const double> analytic, std::span<const double> fd);

struct VerifySuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// The four numeric verification suites behind the `verify` CLI command:
// the no-edit fixed point, the weighted-MLE decomposition, the logit bound
// under deletion-only edits, and the finite-difference gradient check.
std::vector<VerifySuiteResult> run_verification_suites(uint64_t seed);

}  // namespace clore
