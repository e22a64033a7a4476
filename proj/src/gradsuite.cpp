#include <algorithm>
#include <numeric>

#include "mcads/run.hpp"

namespace mcads {

namespace {

constexpr double kPrimitiveTol = 1e-5;
constexpr double kBlockTol = 1e-4;

Tensor uniform(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape, DType::f64);
  for (auto& v : t.data<double>()) v = u(rng);
  return t;
}

// |v| in [0.1, 1] with random sign: no probe starts at a ReLU kink.
Tensor signed_away_from_zero(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(shape, DType::f64);
  for (auto& v : t.data<double>()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Shuffled ramp with spacing 0.05: max/min arguments are unique by a margin.
Tensor spread(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape, DType::f64);
  auto d = t.data<double>();
  std::vector<double> v(d.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.05 * static_cast<double>(i);
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), d.begin());
  return t;
}

Var leaf(Tensor t) { return Var(std::move(t), true); }

std::vector<GradLeaf> with_params(const ParamStore& store, std::vector<GradLeaf> leaves, std::size_t stride = 1) {
  const auto params = store.parameters();
  for (std::size_t i = 0; i < params.size(); i += stride) leaves.push_back({params[i]->name, params[i]->var});
  return leaves;
}

GradCheckOptions probes(int n) {
  GradCheckOptions o;
  o.max_probes_per_leaf = n;
  return o;
}

struct Check {
  std::string name;
  std::function<GradCheckResult(const std::string&)> run;
};

std::vector<Check> primitive_checks() {
  std::vector<Check> c;
  auto simple = [&c](std::string name, std::vector<std::pair<std::string, Tensor>> inputs,
                     std::function<Var(const std::vector<Var>&)> fn, GradCheckOptions opts = {}) {
    c.push_back({name, [inputs, fn, opts](const std::string& n) {
                   std::vector<Var> vars;
                   std::vector<GradLeaf> leaves;
                   for (const auto& [ln, t] : inputs) {
                     vars.push_back(leaf(t));
                     leaves.push_back({ln, vars.back()});
                   }
                   return gradient_check(n, leaves, [&] { return fn(vars); }, kPrimitiveTol, opts);
                 }});
  };
  const Tensor x = uniform({2, 4, 4, 3}, 1);
  simple("conv2d", {{"x", x}, {"w", uniform({3, 3, 3, 2}, 2)}, {"b", uniform({2}, 3)}},
         [](const auto& v) { return conv2d(v[0], v[1], v[2]); });
  simple("conv2d.depthwise", {{"x", x}, {"w", uniform({3, 3, 1, 3}, 4)}},
         [](const auto& v) { return conv2d(v[0], v[1], Var(), {.groups = 3}); });
  simple("conv2d.strided_dilated", {{"x", uniform({1, 6, 6, 2}, 5)}, {"w", uniform({3, 3, 2, 2}, 6)}},
         [](const auto& v) { return conv2d(v[0], v[1], Var(), {.stride = 2, .dilation = 2}); });
  simple("conv2d_transpose", {{"x", uniform({1, 3, 2, 2}, 7)}, {"w", uniform({3, 3, 3, 2}, 8)}, {"b", uniform({3}, 9)}},
         [](const auto& v) { return conv2d_transpose(v[0], v[1], v[2], 2); });
  simple("batch_norm", {{"x", uniform({2, 3, 3, 2}, 10)}, {"gamma", uniform({2}, 11, 0.5, 1.5)}, {"beta", uniform({2}, 12)}},
         [](const auto& v) {
           Tensor rm({2}, DType::f64, 0.0), rv({2}, DType::f64, 1.0);
           return batch_norm(v[0], v[1], v[2], rm, rv, {});
         });
  const Tensor a = signed_away_from_zero({1, 3, 3, 2}, 13);
  simple("relu", {{"x", a}}, [](const auto& v) { return relu(v[0]); });
  simple("leaky_relu", {{"x", a}}, [](const auto& v) { return leaky_relu(v[0], 0.01); });
  simple("swish", {{"x", a}}, [](const auto& v) { return swish(v[0]); });
  simple("sigmoid", {{"x", a}}, [](const auto& v) { return sigmoid(v[0]); });
  simple("softmax", {{"x", uniform({3, 5}, 14, -2, 2)}}, [](const auto& v) { return softmax(v[0], 1); });
  const Tensor s = spread({2, 3, 3, 4}, 15);
  simple("pool_global.avg", {{"x", s}}, [](const auto& v) { return pool_global(GlobalPool::avg, v[0]); });
  simple("pool_global.max", {{"x", s}}, [](const auto& v) { return pool_global(GlobalPool::max, v[0]); });
  simple("pool_channel.mean", {{"x", s}}, [](const auto& v) { return pool_channel(ChannelPool::mean, v[0]); });
  simple("pool_channel.max", {{"x", s}}, [](const auto& v) { return pool_channel(ChannelPool::max, v[0]); });
  simple("pool_channel.min", {{"x", s}}, [](const auto& v) { return pool_channel(ChannelPool::min, v[0]); });
  simple("pool_channel.sum", {{"x", s}}, [](const auto& v) { return pool_channel(ChannelPool::sum, v[0]); });
  const Tensor w = spread({1, 4, 4, 2}, 16);
  simple("max_pool2d", {{"x", w}}, [](const auto& v) { return max_pool2d(v[0], 2); });
  simple("avg_pool2d", {{"x", w}}, [](const auto& v) { return avg_pool2d(v[0], 2); });
  simple("bilinear_upsample", {{"x", uniform({1, 3, 2, 2}, 17)}}, [](const auto& v) { return bilinear_upsample(v[0], 2); });
  simple("depth_to_space", {{"x", uniform({1, 2, 2, 8}, 18)}}, [](const auto& v) { return depth_to_space(v[0], 2); });
  simple("space_to_depth", {{"x", uniform({1, 4, 4, 2}, 19)}}, [](const auto& v) { return space_to_depth(v[0], 2); });
  simple("dense", {{"x", uniform({2, 3, 4}, 20)}, {"w", uniform({4, 3}, 21)}, {"b", uniform({3}, 22)}},
         [](const auto& v) { return dense(v[0], v[1], v[2]); });
  simple("concat", {{"x", uniform({1, 2, 2, 2}, 23)}, {"y", uniform({1, 2, 2, 3}, 24)}},
         [](const auto& v) { return concat({v[0], v[1]}, 3); });
  simple("add", {{"x", uniform({2, 2, 2, 3}, 25)}, {"g", uniform({2, 1, 1, 3}, 26)}},
         [](const auto& v) { return add(v[0], v[1]); });
  simple("mul", {{"x", uniform({2, 2, 2, 3}, 27)}, {"g", uniform({2, 2, 2, 1}, 28)}},
         [](const auto& v) { return mul(v[0], v[1]); });
  simple("matmul", {{"a", uniform({2, 3, 4}, 29)}, {"b", uniform({2, 4, 2}, 30)}},
         [](const auto& v) { return matmul(v[0], v[1]); });
  simple("matmul.transpose_b", {{"a", uniform({2, 3, 4}, 31)}, {"b", uniform({2, 5, 4}, 32)}},
         [](const auto& v) { return matmul(v[0], v[1], true); });
  simple("scale", {{"x", uniform({2, 3}, 33)}}, [](const auto& v) { return scale(v[0], -2.5); });
  simple("reshape", {{"x", uniform({2, 3, 4}, 34)}}, [](const auto& v) { return reshape(v[0], {6, 4}); });
  simple("sum", {{"x", uniform({2, 3}, 35)}}, [](const auto& v) { return sum(v[0]); });
  simple("mean", {{"x", uniform({2, 3}, 36)}}, [](const auto& v) { return mean(v[0]); });
  Tensor target({1, 3, 3, 1}, DType::f64, 0.0);
  for (std::int64_t i = 0; i < target.numel(); i += 2) target.set_item(i, 1.0);
  simple("bce_loss", {{"pred", uniform({1, 3, 3, 1}, 37, 0.05, 0.95)}},
         [target](const auto& v) { return bce_loss(v[0], target); });
  return c;
}

// Blocks own a ParamStore; the check builds it inside the closure.
template <class Build>
Check block(std::string name, Build build) {
  return {std::move(name), build};
}

std::vector<Check> block_checks() {
  std::vector<Check> c;
  c.push_back(block("cb", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    ConvBlock b(s, "cb", 3, 4, {});
    Var x = leaf(uniform({2, 4, 4, 3}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol);
  }));
  c.push_back(block("dsub", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    Dsub b(s, "up", 2, 3, {});
    Var x = leaf(uniform({2, 2, 2, 2}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol,
                          probes(24));
  }));
  c.push_back(block("eub", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    Eub b(s, "up", 3, 2, {});
    Var x = leaf(uniform({2, 2, 3, 3}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol,
                          probes(24));
  }));
  c.push_back(block("convtp", [](const std::string& n) {
    ParamStore s(DType::f64, 1);
    ConvTranspose b(s, "up", 3, 5);
    Var x = leaf(uniform({1, 3, 2, 3}, 2));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol);
  }));
  c.push_back(block("cam", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    ChannelAttention b(s, "cam", 4, {.cam_reduction = 2});
    Var x = leaf(spread({2, 3, 3, 4}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x); }, kBlockTol);
  }));
  c.push_back(block("sam", [](const std::string& n) {
    ParamStore s(DType::f64, 1);
    SpatialAttention b(s, "sam");
    Var x = leaf(spread({1, 4, 4, 3}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x); }, kBlockTol, probes(24));
  }));
  c.push_back(block("casab", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    Casab b(s, "casab", 3, 4, {.cam_reduction = 2});
    Var x = leaf(uniform({2, 3, 3, 3}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol,
                          probes(24));
  }));
  c.push_back(block("rb", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    ResidualBlock b(s, "rb", 2, 2, {});
    Var x = leaf(uniform({2, 3, 3, 2}, 4));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol,
                          probes(24));
  }));
  c.push_back(block("rlab", [](const std::string& n) {
    ParamStore s(DType::f64, 3);
    Rlab b(s, "rlab", 2, 3, 2, {});
    Var skip = leaf(uniform({1, 4, 4, 2}, 4));
    Var up = leaf(uniform({1, 4, 4, 3}, 5));
    return gradient_check(n, with_params(s, {{"skip", skip}, {"up", up}}),
                          [&] { return b.forward(skip, up, Mode::train); }, kBlockTol, probes(24));
  }));
  c.push_back(block("rlab.pooled", [](const std::string& n) {
    ParamStore s(DType::f64, 5);
    Rlab b(s, "rlab", 2, 2, 1, {.attention_token_cap = 4});
    Var skip = leaf(uniform({1, 4, 4, 2}, 6));
    Var up = leaf(uniform({1, 4, 4, 2}, 7));
    return gradient_check(n, with_params(s, {{"skip", skip}, {"up", up}}),
                          [&] { return b.forward(skip, up, Mode::train); }, kBlockTol, probes(24));
  }));
  c.push_back(block("rsu", [](const std::string& n) {
    ParamStore s(DType::f64, 7);
    Rsu b(s, "rsu", 3, false, 1, 2, 2, true, {});
    Var x = leaf(uniform({2, 4, 4, 1}, 8));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, Mode::train); }, kBlockTol,
                          probes(8));
  }));
  c.push_back(block("head", [](const std::string& n) {
    ParamStore s(DType::f64, 9);
    SegmentationHead b(s, "head", 3);
    Var x = leaf(uniform({1, 2, 2, 3}, 10));
    return gradient_check(n, with_params(s, {{"x", x}}), [&] { return b.forward(x, 4); }, kBlockTol);
  }));
  c.push_back(block("decoder_stage", [](const std::string& n) {
    ParamStore s(DType::f64, 11);
    DecoderStage b(s, "d", 2, 2, 2, UpsamplerKind::dsub, 1, {}, {.cam_reduction = 2});
    Var deeper = leaf(uniform({1, 2, 2, 2}, 12));
    Var skip = leaf(uniform({1, 4, 4, 2}, 13));
    return gradient_check(n, with_params(s, {{"deeper", deeper}, {"skip", skip}}),
                          [&] { return b.forward(deeper, skip, Mode::train); }, kBlockTol, probes(6));
  }));
  c.push_back(block("micro_model", [](const std::string& n) {
    ModelConfig cfg;
    cfg.encoder.stage_filters = {2, 2, 2, 2, 2, 2};
    cfg.encoder.rsu_depths = {3, 3, 3, 3, 3, 3};
    cfg.encoder.input_channels = 1;
    cfg.decoder.rlab_iterations = {2, 1, 1, 1, 1};
    cfg.decoder.upsamplers = {UpsamplerKind::dsub, UpsamplerKind::eub, UpsamplerKind::convtp, UpsamplerKind::eub,
                              UpsamplerKind::dsub};
    cfg.blocks.cam_reduction = 2;
    cfg.blocks.attention_token_cap = 64;
    Model m(cfg, DType::f64, 31);
    Var x = leaf(uniform({2, 32, 32, 1}, 32));
    Tensor target({2, 32, 32, 1}, DType::f64, 0.0);
    for (std::int64_t i = 0; i < target.numel(); i += 5) target.set_item(i, 1.0);
    // Every fifth parameter tensor plus the input keeps the probe count small.
    return gradient_check(n, with_params(m.store(), {{"x", x}}, 5),
                          [&] { return deep_supervision_loss(m.forward(x, Mode::train), target).total; }, kBlockTol,
                          probes(2));
  }));
  return c;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(const GradSuiteOptions& opts,
                                                const std::function<void(const GradCheckResult&)>& on_result) {
  auto checks = primitive_checks();
  for (auto& b : block_checks()) checks.push_back(std::move(b));
  std::vector<GradCheckResult> out;
  for (const auto& c : checks) {
    if (!opts.only.empty() && c.name.find(opts.only) == std::string::npos) continue;
    out.push_back(c.run(c.name));
    if (on_result) on_result(out.back());
  }
  return out;
}

}  // namespace mcads
