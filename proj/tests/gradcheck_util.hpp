#pragma once

#include <doctest.h>

#include "mcads/gradcheck.hpp"

namespace testutil {

inline mcads::Var leaf(mcads::Tensor t) { return mcads::Var(std::move(t), true); }

inline void expect_gradients(const std::string& name, const std::vector<mcads::GradLeaf>& leaves,
                             const std::function<mcads::Var()>& fn, double tol,
                             mcads::GradCheckOptions opts = {}) {
  const auto r = mcads::gradient_check(name, leaves, fn, tol, opts);
  INFO(name << ": max rel err " << r.max_rel_error << " at " << r.worst << " (" << r.probes << " probes, "
            << r.kink_skipped << " skipped)");
  CHECK(r.passed);
}

}  // namespace testutil
