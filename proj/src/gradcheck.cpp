#include "mcads/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mcads/ops.hpp"

namespace mcads {

namespace {

double weighted_sum(const Tensor& out, const Tensor& weights) {
  double acc = 0;
  for (std::int64_t i = 0; i < out.numel(); ++i) acc += out.item(i) * weights.item(i);
  return acc;
}

}  // namespace

GradCheckResult gradient_check(const std::string& name, const std::vector<GradLeaf>& leaves,
                               const std::function<Var()>& forward, double tolerance,
                               const GradCheckOptions& opts) {
  GradCheckResult res;
  res.name = name;
  res.tolerance = tolerance;
  std::mt19937_64 rng(opts.seed);

  // Analytic pass.
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto& leaf = leaves[i];
    if (!leaf.var.requires_grad()) throw ShapeError("gradient_check: leaf '" + leaf.name + "' does not require grad");
    for (std::size_t j = 0; j < i; ++j) {
      if (leaves[j].var.node() == leaf.var.node()) throw ShapeError("gradient_check: leaf '" + leaf.name + "' listed twice");
    }
    leaf.var.node()->grad = Tensor();
  }
  Tensor weights;
  {
    Tape tape;
    TapeScope scope(tape);
    Var out = forward();
    weights = Tensor(out.shape(), out.dtype());
    std::uniform_real_distribution<double> mag(0.5, 1.5);
    std::bernoulli_distribution sign(0.5);
    for (std::int64_t i = 0; i < weights.numel(); ++i) weights.set_item(i, sign(rng) ? mag(rng) : -mag(rng));
    Var loss = sum(mul(out, constant(weights)));
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  for (const auto& leaf : leaves) {
    analytic.push_back(leaf.var.has_grad() ? leaf.var.grad() : leaf.var.value().zeros_like());
    leaf.var.node()->grad = Tensor();
  }

  auto evaluate = [&](std::vector<std::uint64_t>& kinks) {
    KinkMonitor::enable(true);
    Var out = forward();
    kinks = KinkMonitor::take();
    KinkMonitor::enable(false);
    return weighted_sum(out.value(), weights);
  };

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& value = leaves[li].var.node()->value;
    const std::int64_t n = value.numel();
    std::vector<std::int64_t> probes(static_cast<std::size_t>(n));
    std::iota(probes.begin(), probes.end(), 0);
    if (opts.max_probes_per_leaf > 0 && n > opts.max_probes_per_leaf) {
      std::shuffle(probes.begin(), probes.end(), rng);
      probes.resize(static_cast<std::size_t>(opts.max_probes_per_leaf));
      std::sort(probes.begin(), probes.end());
    }
    for (std::int64_t idx : probes) {
      const double orig = value.item(idx);
      double eps = opts.eps;
      bool smooth = false;
      double numeric = 0;
      while (eps >= opts.min_eps * 0.999) {
        std::vector<std::uint64_t> kp, km;
        value.set_item(idx, orig + eps);
        const double fp = evaluate(kp);
        value.set_item(idx, orig - eps);
        const double fm = evaluate(km);
        value.set_item(idx, orig);
        if (kp == km) {
          numeric = (fp - fm) / (2 * eps);
          smooth = true;
          break;
        }
        eps /= 10;
      }
      if (!smooth) {
        ++res.kink_skipped;
        continue;
      }
      const double a = analytic[li].item(idx);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
      ++res.probes;
      if (res.worst.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = leaves[li].name + "[" + std::to_string(idx) + "]";
      }
    }
  }
  res.passed = res.probes > 0 && res.max_rel_error < tolerance;
  return res;
}

}  // namespace mcads
