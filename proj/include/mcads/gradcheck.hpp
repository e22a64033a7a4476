#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mcads/autodiff.hpp"

namespace mcads {

struct GradLeaf {
  std::string name;
  Var var;  // must require grad
};

struct GradCheckOptions {
  double eps = 1e-4;
  // Per-element error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
  // 0 probes every element; otherwise a deterministic sample per leaf.
  int max_probes_per_leaf = 0;
  std::uint64_t seed = 1234;
  // Probes whose +eps / -eps evaluations straddle a ReLU kink or an argmax
  // switch are retried with eps / 10 down to this value, then skipped.
  double min_eps = 1e-7;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::int64_t probes = 0;
  std::int64_t kink_skipped = 0;
  std::string worst;  // "<leaf>[<index>]" of the largest error
  bool passed = false;
};

// Compares reverse-mode gradients of L = sum(forward() * R), with R a fixed
// random weighting, against central finite differences of the same scalar.
// `forward` is re-evaluated with perturbed leaf values and no active tape.
GradCheckResult gradient_check(const std::string& name, const std::vector<GradLeaf>& leaves,
                               const std::function<Var()>& forward, double tolerance,
                               const GradCheckOptions& opts = {});

}  // namespace mcads
