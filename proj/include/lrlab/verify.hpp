#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lrlab/net.hpp"
#include "lrlab/schemes.hpp"

namespace lrlab {

struct GradientCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;  // "<tensor>[i,j]"
  std::size_t checked = 0;
};

// Central finite differences of the regularised batch loss against the
// analytic gradient for every scalar parameter. Relative error is
// |a − n| / max(|a|, |n|, 1e-3).
GradientCheckResult gradient_check(const Network& net, const ParamSet& params, const Batch& batch,
                                   const RegPenalty& reg = {}, double weight_decay = 0.0,
                                   double eps = 1e-5);

// Reference networks used by the invariant suite.
NetworkSpec reference_mlp_spec();
NetworkSpec reference_cnn_spec();

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
  double seconds = 0.0;
};

// Update identity, normalized update, gradient oracles, spectral init,
// spectral-ones, Marchenko-Pastur fit and the cost model breakeven.
std::vector<CheckResult> run_verify_suite(std::uint64_t seed = 0);

}  // namespace lrlab
