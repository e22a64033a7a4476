#pragma once

#include <vector>

#include "mcads/parameter.hpp"

namespace mcads {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Consumes each parameter's gradient (it is cleared
// after the update); a parameter without a gradient is an error.
void adam_step(const std::vector<Parameter*>& params, const AdamOptions& opts);

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {}
  void step() { adam_step(params_, opts_); }
  const AdamOptions& options() const { return opts_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opts_;
};

}  // namespace mcads
