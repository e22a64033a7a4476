#include <doctest.h>

#include <cmath>

#include "gradcheck_util.hpp"
#include "mcads/blocks.hpp"
#include "oracles.hpp"

using namespace mcads;
using testutil::expect_gradients;
using testutil::leaf;

namespace {

std::int64_t cb_count(std::int64_t cin, std::int64_t cout) {
  return 9 * cin + cin + cin * cout + cout + 2 * cin + 2 * cout;
}

std::int64_t rb_step_count(std::int64_t c) { return 9 * c * c + c + c * c + c + 2 * c; }

std::vector<GradLeaf> leaves_of(const ParamStore& store, const std::vector<std::pair<std::string, Var>>& inputs) {
  std::vector<GradLeaf> out;
  for (const auto& [n, v] : inputs) out.push_back({n, v});
  for (auto* p : store.parameters()) out.push_back({p->name, p->var});
  return out;
}

GradCheckOptions sampled(int probes = 24) {
  GradCheckOptions o;
  o.max_probes_per_leaf = probes;
  return o;
}

void zero(Parameter* p) { p->mutable_value().fill(0.0); }

}  // namespace

TEST_CASE("conv block shape, parameter count, gradients") {
  ParamStore store(DType::f64, 1);
  ConvBlock cb(store, "cb", 16, 32, {});
  CHECK(store.parameter_count() == 800);
  CHECK(cb_count(16, 32) == 800);
  Var y = cb.forward(constant(oracle::random({1, 8, 8, 16}, 2)), Mode::train);
  CHECK(y.shape() == Shape{1, 8, 8, 32});

  ParamStore small(DType::f64, 3);
  ConvBlock cb2(small, "cb", 3, 4, {});
  Var x = leaf(oracle::random({2, 4, 4, 3}, 4));
  expect_gradients("cb", leaves_of(small, {{"x", x}}), [&] { return cb2.forward(x, Mode::train); }, 1e-4);
}

TEST_CASE("dsub shape, rearrangement, parameter count, gradients") {
  ParamStore store(DType::f64, 1);
  Dsub d(store, "up", 64, 24, {});
  Var x = constant(oracle::random({1, 4, 4, 64}, 2));
  CHECK(d.forward(x, Mode::train).shape() == Shape{1, 8, 8, 24});
  CHECK(d.rearranged(x).shape() == Shape{1, 8, 8, 64});
  CHECK(store.parameter_count() == 9 * 64 * 256 + 256 + 9 * 64 * 64 + 64 + cb_count(64, 24));

  ParamStore small(DType::f64, 3);
  Dsub d2(small, "up", 2, 3, {});
  Var xs = leaf(oracle::random({2, 2, 2, 2}, 4));
  expect_gradients("dsub", leaves_of(small, {{"x", xs}}), [&] { return d2.forward(xs, Mode::train); }, 1e-4,
                   sampled());
}

TEST_CASE("eub shape, parameter count, gradients") {
  ParamStore store(DType::f64, 1);
  Eub e(store, "up", 64, 24, {});
  CHECK(e.forward(constant(oracle::random({1, 4, 4, 64}, 2)), Mode::train).shape() == Shape{1, 8, 8, 24});
  CHECK(store.parameter_count() == cb_count(64, 24) + cb_count(24, 24));

  for (int c : {8, 32, 64, 512}) {
    ParamStore a(DType::f32, 1, InitMode::meta), b(DType::f32, 1, InitMode::meta);
    Eub ea(a, "e", c, c, {});
    Dsub db(b, "d", c, c, {});
    CHECK(a.parameter_count() < b.parameter_count());
  }

  ParamStore small(DType::f64, 3);
  Eub e2(small, "up", 3, 2, {});
  Var xs = leaf(oracle::random({2, 2, 3, 3}, 4));
  expect_gradients("eub", leaves_of(small, {{"x", xs}}), [&] { return e2.forward(xs, Mode::train); }, 1e-4,
                   sampled());
}

TEST_CASE("transposed-convolution upsampler") {
  ParamStore store(DType::f64, 1);
  ConvTranspose t(store, "up", 3, 5);
  Var x = leaf(oracle::random({1, 3, 2, 3}, 2));
  CHECK(t.forward(x, Mode::train).shape() == Shape{1, 6, 4, 5});
  CHECK(store.parameter_count() == 9 * 3 * 5 + 5);
  expect_gradients("convtp", leaves_of(store, {{"x", x}}), [&] { return t.forward(x, Mode::train); }, 1e-4);

  auto bil = make_upsampler(UpsamplerKind::bilinear, store, "b", 3, 3, {});
  CHECK(bil->forward(x, Mode::train).shape() == Shape{1, 6, 4, 3});
  CHECK(parse_upsampler("eub") == UpsamplerKind::eub);
  CHECK_THROWS_AS(parse_upsampler("pixelshuffle"), ShapeError);
}

TEST_CASE("channel attention") {
  ParamStore store(DType::f64, 1);
  ChannelAttention cam(store, "cam", 16, {});
  CHECK(store.parameter_count() == 16 * 2 + 2 + 2 * 16 + 16);

  Var z = constant(Tensor({1, 4, 4, 16}, DType::f64, 0.0));
  for (double v : cam.forward(z).value().to_vector()) CHECK(v == 0.0);

  Tensor xr = oracle::random({2, 4, 4, 16}, 2, -3, 3);
  Tensor g = cam.gate(constant(xr)).value();
  CHECK(g.shape() == Shape{2, 1, 1, 16});
  for (double v : g.to_vector()) CHECK((v > 0 && v < 1));
  Tensor y = cam.forward(constant(xr)).value();
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.item(i)) <= std::abs(xr.item(i)));

  for (auto* p : store.parameters()) zero(p);
  Tensor half = cam.forward(constant(xr)).value();
  for (std::int64_t i = 0; i < half.numel(); ++i) CHECK(half.item(i) == 0.5 * xr.item(i));

  ParamStore small(DType::f64, 3);
  ChannelAttention c2(small, "cam", 4, {.cam_reduction = 2});
  Var x = leaf(oracle::distinct({2, 3, 3, 4}, 4));
  expect_gradients("cam", leaves_of(small, {{"x", x}}), [&] { return c2.forward(x); }, 1e-4);
}

TEST_CASE("spatial attention") {
  ParamStore store(DType::f64, 1);
  SpatialAttention sam(store, "sam");
  CHECK(store.parameter_count() == 49 * 4 + 4 + 4 + 1);

  Var z = constant(Tensor({1, 5, 5, 6}, DType::f64, 0.0));
  for (double v : SpatialAttention::pooled(z).value().to_vector()) CHECK(v == 0.0);
  for (double v : sam.forward(z).value().to_vector()) CHECK(v == 0.0);

  Tensor one = oracle::random({1, 3, 3, 1}, 2);
  Tensor p = SpatialAttention::pooled(constant(one)).value();
  CHECK(p.shape() == Shape{1, 3, 3, 4});
  for (std::int64_t i = 0; i < one.numel(); ++i) {
    for (int k = 0; k < 4; ++k) CHECK(p.item(i * 4 + k) == one.item(i));
  }

  Tensor xr = oracle::random({2, 6, 6, 5}, 3, -3, 3);
  Tensor g = sam.gate(constant(xr)).value();
  CHECK(g.shape() == Shape{2, 6, 6, 1});
  for (double v : g.to_vector()) CHECK((v > 0 && v < 1));
  Tensor y = sam.forward(constant(xr)).value();
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.item(i)) <= std::abs(xr.item(i)));

  Var x = leaf(oracle::distinct({1, 4, 4, 3}, 4));
  expect_gradients("sam", leaves_of(store, {{"x", x}}), [&] { return sam.forward(x); }, 1e-4, sampled());
}

TEST_CASE("casab") {
  ParamStore store(DType::f64, 1);
  Casab ca(store, "casab", 6, 6, {});
  Tensor xr = oracle::random({1, 8, 8, 6}, 2);
  CHECK(ca.forward(constant(xr), Mode::train).shape() == Shape{1, 8, 8, 6});
  CHECK(store.parameter_count() == cb_count(6, 6) + (6 * 1 + 1 + 1 * 6 + 6) + 205);

  // A large negative bias closes the channel gate: only the SAM branch remains.
  store.find("casab.cam.fc2.b")->mutable_value().fill(-1e3);
  Tensor both = ca.forward(constant(xr), Mode::infer).value();
  Tensor sam_only = ca.sam().forward(ca.refine().forward(constant(xr), Mode::infer)).value();
  CHECK(max_abs_diff(both, sam_only) < 1e-6);

  ParamStore small(DType::f64, 3);
  Casab c2(small, "casab", 3, 4, {.cam_reduction = 2});
  Var x = leaf(oracle::random({2, 3, 3, 3}, 4));
  expect_gradients("casab", leaves_of(small, {{"x", x}}), [&] { return c2.forward(x, Mode::train); }, 1e-4,
                   sampled());
}

TEST_CASE("residual block") {
  ParamStore store(DType::f64, 1);
  ResidualBlock rb(store, "rb", 3, 1, {});
  for (auto* p : store.parameters()) {
    if (p->name.find(".conv") != std::string::npos) zero(p);
  }
  Tensor xr = oracle::random({2, 4, 4, 3}, 2);
  Tensor y = rb.forward(constant(xr), Mode::train).value();
  Tensor rm({3}, DType::f64, 0.0), rv({3}, DType::f64, 1.0);
  Tensor ref = batch_norm(leaky_relu(constant(xr)), constant(Tensor({3}, DType::f64, 1.0)),
                          constant(Tensor({3}, DType::f64, 0.0)), rm, rv, {})
                   .value();
  CHECK(max_abs_diff(y, ref) == 0.0);

  std::int64_t counts[4];
  for (int n = 1; n <= 3; ++n) {
    ParamStore s(DType::f32, 1, InitMode::meta);
    ResidualBlock r(s, "rb", 8, n, {});
    counts[n] = s.parameter_count();
  }
  CHECK(counts[3] - counts[2] == counts[2] - counts[1]);
  CHECK(counts[1] == rb_step_count(8));
  CHECK(store.find("rb.rb1.conv3.w") != nullptr);

  ParamStore small(DType::f64, 3);
  ResidualBlock r2(small, "rb", 2, 2, {});
  Var x = leaf(oracle::random({2, 3, 3, 2}, 4));
  expect_gradients("rb", leaves_of(small, {{"x", x}}), [&] { return r2.forward(x, Mode::train); }, 1e-4, sampled());
  CHECK_THROWS_AS(ResidualBlock(small, "rb0", 2, 0, {}), ShapeError);
}

TEST_CASE("rlab shape, attention rows, residual identity") {
  ParamStore store(DType::f64, 1);
  Rlab r(store, "rlab", 64, 64, 1, {});
  RlabTrace trace;
  Var y = r.forward(constant(oracle::random({1, 8, 8, 64}, 2)), constant(oracle::random({1, 8, 8, 64}, 3)),
                    Mode::train, &trace);
  CHECK(y.shape() == Shape{1, 8, 8, 128});
  CHECK(trace.attention.shape() == Shape{1, 64, 64});
  for (std::int64_t row = 0; row < 64; ++row) {
    double acc = 0;
    for (std::int64_t j = 0; j < 64; ++j) acc += trace.attention.item(row * 64 + j);
    CHECK(std::abs(acc - 1) < 1e-6);
  }

  zero(r.value_projection().weight());
  zero(r.value_projection().bias());
  Var y0 = r.forward(constant(oracle::random({1, 8, 8, 64}, 2)), constant(oracle::random({1, 8, 8, 64}, 3)),
                     Mode::train, &trace);
  CHECK(max_abs_diff(y0.value(), trace.xbar) == 0.0);

  CHECK_THROWS_AS(r.forward(constant(Tensor({1, 8, 8, 64}, DType::f64)), constant(Tensor({1, 4, 4, 64}, DType::f64)),
                          Mode::train),
                  ShapeError);
}

TEST_CASE("rlab parameter count") {
  ParamStore store(DType::f32, 1, InitMode::meta);
  Rlab r(store, "rlab", 6, 10, 2, {});
  const std::int64_t c = 16;
  CHECK(store.parameter_count() == 2 * rb_step_count(6) + cb_count(c, c) + 3 * (c * c + c));
}

TEST_CASE("rlab token cap pools attention") {
  CHECK(attention_pool_factor(8, 8, 1024) == 1);
  CHECK(attention_pool_factor(64, 64, 1024) == 2);
  CHECK(attention_pool_factor(256, 256, 1024) == 8);
  CHECK(attention_pool_factor(256, 256, 0) == 1);
  CHECK(attention_pool_factor(6, 6, 4) == 2);

  ParamStore store(DType::f64, 1);
  Rlab r(store, "rlab", 2, 2, 1, {.attention_token_cap = 16});
  RlabTrace trace;
  Var y = r.forward(constant(oracle::random({1, 16, 16, 2}, 2)), constant(oracle::random({1, 16, 16, 2}, 3)),
                    Mode::train, &trace);
  CHECK(y.shape() == Shape{1, 16, 16, 4});
  CHECK(trace.pool_factor == 4);
  CHECK(trace.attention.shape() == Shape{1, 16, 16});
}

TEST_CASE("rlab gradients") {
  ParamStore store(DType::f64, 3);
  Rlab r(store, "rlab", 2, 3, 2, {});
  Var skip = leaf(oracle::random({1, 4, 4, 2}, 4));
  Var up = leaf(oracle::random({1, 4, 4, 3}, 5));
  expect_gradients("rlab", leaves_of(store, {{"skip", skip}, {"up", up}}),
                   [&] { return r.forward(skip, up, Mode::train); }, 1e-4, sampled(16));

  ParamStore pooled(DType::f64, 5);
  Rlab rp(pooled, "rlab", 2, 2, 1, {.attention_token_cap = 4});
  Var s2 = leaf(oracle::random({1, 4, 4, 2}, 6));
  Var u2 = leaf(oracle::random({1, 4, 4, 2}, 7));
  expect_gradients("rlab.pooled", leaves_of(pooled, {{"skip", s2}, {"up", u2}}),
                   [&] { return rp.forward(s2, u2, Mode::train); }, 1e-4, sampled(16));
}
