#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "gradcheck_util.hpp"
#include "mcads/model.hpp"
#include "oracles.hpp"

using namespace mcads;
using testutil::expect_gradients;
using testutil::leaf;

namespace {

std::int64_t cb_count(std::int64_t cin, std::int64_t cout) {
  return 9 * cin + cin + cin * cout + cout + 2 * cin + 2 * cout;
}
std::int64_t rlab_count(std::int64_t skip, std::int64_t up, int n) {
  const std::int64_t c = skip + up;
  return n * (9 * skip * skip + skip + skip * skip + skip + 2 * skip) + cb_count(c, c) + 3 * (c * c + c);
}
std::int64_t casab_count(std::int64_t cin, std::int64_t cout) {
  const std::int64_t h = std::max<std::int64_t>(cout / 8, 1);
  return cb_count(cin, cout) + (cout * h + h + h * cout + cout) + 205;
}

// Biases whose only consumer is a train-mode batch norm are removed by its
// mean subtraction; their gradient is zero analytically.
bool feeds_batch_norm(const std::string& name) {
  auto ends = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends(".dw.b") || ends(".pw.b") || (name.find(".rsu.") != std::string::npos && ends(".conv.b"));
}

void audit_gradient_reach(const ParamStore& store) {
  std::int64_t unreached = 0, zero = 0;
  for (auto* p : store.parameters()) {
    if (!p->var.has_grad()) {
      ++unreached;
      MESSAGE("unreached: " << p->name);
      continue;
    }
    bool nonzero = false;
    for (double g : p->var.grad().to_vector()) nonzero = nonzero || g != 0.0;
    if (!nonzero && !feeds_batch_norm(p->name)) {
      ++zero;
      MESSAGE("zero gradient: " << p->name);
    }
  }
  CHECK(unreached == 0);
  CHECK(zero == 0);
}

bool any_name_contains(const ParamStore& s, const std::string& needle) {
  for (const auto& p : s.params()) {
    if (p->name.find(needle) != std::string::npos) return true;
  }
  return false;
}

ModelConfig tiny_config(int width = 4) {
  ModelConfig cfg;
  cfg.encoder.stage_filters = {width, width, width, width, width, width};
  cfg.encoder.rsu_depths = {3, 3, 3, 3, 3, 3};
  cfg.encoder.input_channels = 1;
  cfg.decoder.rlab_iterations = {2, 1, 1, 1, 1};
  return cfg;
}

GradCheckOptions sampled(int probes) {
  GradCheckOptions o;
  o.max_probes_per_leaf = probes;
  return o;
}

// Plain RSU forward written directly from the registered weights: U-Net of
// REBN convs with concat(skip, up) junctions and an outer residual.
Var reference_rsu(const ParamStore& s, const std::string& p, int depth, const Var& x) {
  auto rebn = [&](const std::string& n, const Var& in, int dil) {
    Tensor rm = *s.find_buffer(n + ".bn.running_mean");
    Tensor rv = *s.find_buffer(n + ".bn.running_var");
    Var c = conv2d(in, s.find(n + ".conv.w")->var, s.find(n + ".conv.b")->var, {.dilation = dil});
    return relu(batch_norm(c, s.find(n + ".bn.gamma")->var, s.find(n + ".bn.beta")->var, rm, rv, {}));
  };
  Var hin = rebn(p + ".in", x, 1);
  std::vector<Var> enc{rebn(p + ".down1", hin, 1)};
  for (int i = 2; i < depth; ++i) enc.push_back(rebn(p + ".down" + std::to_string(i), max_pool2d(enc.back(), 2), 1));
  Var d = rebn(p + ".down" + std::to_string(depth), enc.back(), 2);
  for (int level = depth - 1; level >= 1; --level) {
    const Var& skip = enc[static_cast<std::size_t>(level - 1)];
    if (d.shape()[1] != skip.shape()[1]) d = bilinear_upsample(d, 2);
    d = rebn(p + ".up" + std::to_string(level), concat({skip, d}, 3), 1);
  }
  return add(d, hin);
}

}  // namespace

TEST_CASE("rsu and encoder shapes at full size") {
  ModelConfig cfg;
  ParamStore store(DType::f32, 1, InitMode::meta);
  Encoder enc(store, "encoder", cfg.encoder, cfg.blocks);
  auto f = enc.forward(constant(Tensor::meta({1, 256, 256, 3}, DType::f32)), Mode::train);
  const std::int64_t sizes[] = {256, 128, 64, 32, 16, 8};
  const std::int64_t chans[] = {64, 128, 256, 512, 512, 512};
  for (int k = 0; k < 6; ++k) CHECK(f[static_cast<std::size_t>(k)].shape() == Shape{1, sizes[k], sizes[k], chans[k]});

  ParamStore s0(DType::f32, 1, InitMode::meta);
  Rsu rsu(s0, "rsu", 7, false, 3, 32, 64, true, cfg.blocks);
  Var out = rsu.forward(constant(Tensor::meta({1, 64, 64, 3}, DType::f32)), Mode::train);
  CHECK(out.shape() == Shape{1, 64, 64, 64});
  CHECK(max_pool2d(out, 2).shape() == Shape{1, 32, 32, 64});
  CHECK(rsu.required_divisor() == 32);
  CHECK_THROWS_AS(rsu.forward(constant(Tensor::meta({1, 48, 48, 3}, DType::f32)), Mode::train), ShapeError);
  CHECK_THROWS_AS(enc.forward(constant(Tensor::meta({1, 80, 64, 3}, DType::f32)), Mode::train), ShapeError);
}

TEST_CASE("encoder at desk size") {
  ModelConfig cfg;
  cfg.encoder.stage_filters = {8, 16, 32, 32, 32, 32};
  ParamStore store(DType::f32, 1);
  Encoder enc(store, "encoder", cfg.encoder, cfg.blocks);
  auto f = enc.forward(constant(oracle::random({1, 64, 64, 3}, 2, 0, 1, DType::f32)), Mode::train);
  const std::int64_t sizes[] = {64, 32, 16, 8, 4, 2};
  for (int k = 0; k < 6; ++k) {
    CHECK(f[static_cast<std::size_t>(k)].shape() ==
          Shape{1, sizes[k], sizes[k], cfg.encoder.stage_filters[static_cast<std::size_t>(k)]});
    CHECK(f[static_cast<std::size_t>(k)].value().all_finite());
  }
}

TEST_CASE("attention toggles are structural and accounted exactly") {
  EncoderConfig base;
  base.inner_attention = false;
  base.casab_per_stage = false;
  BlockOptions opts;
  ParamStore plain(DType::f32, 1, InitMode::meta);
  Encoder e0(plain, "encoder", base, opts);
  CHECK(!any_name_contains(plain, ".att"));
  CHECK(!any_name_contains(plain, "casab"));
  CHECK(!any_name_contains(plain, "rlab"));

  EncoderConfig inner = base;
  inner.inner_attention = true;
  ParamStore with_inner(DType::f32, 1, InitMode::meta);
  Encoder e1(with_inner, "encoder", inner, opts);
  std::int64_t expected_inner = 0;
  for (int k = 0; k < 6; ++k) {
    const std::int64_t mid = base.stage_filters[static_cast<std::size_t>(k)] / 2;
    expected_inner += (base.rsu_depths[static_cast<std::size_t>(k)] - 1) * rlab_count(mid, mid, 1);
  }
  CHECK(with_inner.parameter_count() - plain.parameter_count() == expected_inner);

  EncoderConfig full = inner;
  full.casab_per_stage = true;
  ParamStore with_all(DType::f32, 1, InitMode::meta);
  Encoder e2(with_all, "encoder", full, opts);
  std::int64_t expected_casab = 0;
  for (int c : base.stage_filters) expected_casab += casab_count(c, c);
  CHECK(with_all.parameter_count() - with_inner.parameter_count() == expected_casab);
}

TEST_CASE("plain rsu matches the reference implementation") {
  BlockOptions opts;
  for (int depth : {3, 5}) {
    ParamStore store(DType::f64, 7);
    Rsu rsu(store, "rsu", depth, false, 3, 4, 6, false, opts);
    Tensor x = oracle::random({2, 16, 16, 3}, 8);
    Tensor y = rsu.forward(constant(x), Mode::train).value();
    Tensor ref = reference_rsu(store, "rsu", depth, constant(x)).value();
    CHECK(max_abs_diff(y, ref) < 1e-6);
  }
}

TEST_CASE("inner attention fusion") {
  BlockOptions opts;
  ParamStore store(DType::f64, 2);
  InnerAttention att(store, "att", 3, 5, true, opts);
  Var skip = constant(oracle::random({1, 4, 4, 3}, 1));
  Var up = constant(oracle::random({1, 4, 4, 5}, 2));
  CHECK(att.forward(skip, up, Mode::train).shape() == Shape{1, 4, 4, 8});

  store.find("att.v.w")->mutable_value().fill(0.0);
  store.find("att.v.b")->mutable_value().fill(0.0);
  // RB-refined skip, computed with an N=1 residual block sharing the weights.
  Tensor rm = *store.find_buffer("att.rb1.bn.running_mean");
  Tensor rv = *store.find_buffer("att.rb1.bn.running_var");
  Var h = conv2d(conv2d(skip, store.find("att.rb1.conv3.w")->var, store.find("att.rb1.conv3.b")->var),
                 store.find("att.rb1.conv1.w")->var, store.find("att.rb1.conv1.b")->var);
  Var rb = batch_norm(leaky_relu(add(skip, h)), store.find("att.rb1.bn.gamma")->var,
                      store.find("att.rb1.bn.beta")->var, rm, rv, {});
  Tensor expect = concat({rb, up}, 3).value();
  CHECK(max_abs_diff(att.forward(skip, up, Mode::train).value(), expect) == 0.0);

  ParamStore off(DType::f64, 2);
  InnerAttention none(off, "att", 3, 5, false, opts);
  CHECK(off.parameter_count() == 0);
  CHECK(max_abs_diff(none.forward(skip, up, Mode::train).value(), concat({skip, up}, 3).value()) == 0.0);

  ParamStore g(DType::f64, 3);
  InnerAttention ga(g, "att", 2, 2, true, opts);
  Var s = leaf(oracle::random({1, 4, 4, 2}, 4));
  Var u = leaf(oracle::random({1, 4, 4, 2}, 5));
  std::vector<GradLeaf> leaves{{"skip", s}, {"up", u}};
  for (auto* p : g.parameters()) leaves.push_back({p->name, p->var});
  expect_gradients("inner_attention", leaves, [&] { return ga.forward(s, u, Mode::train); }, 1e-4, sampled(16));
}

TEST_CASE("shallow rsu gradients") {
  BlockOptions opts;
  ParamStore store(DType::f64, 4);
  Rsu rsu(store, "rsu", 3, false, 2, 2, 3, true, opts);
  Var x = leaf(oracle::random({1, 8, 8, 2}, 5));
  std::vector<GradLeaf> leaves{{"x", x}};
  for (auto* p : store.parameters()) leaves.push_back({p->name, p->var});
  expect_gradients("rsu", leaves, [&] { return rsu.forward(x, Mode::train); }, 1e-4, sampled(8));
}

TEST_CASE("every encoder parameter receives a gradient") {
  // 64x64 keeps the bridge at 2x2, so its attention sees more than one token.
  ModelConfig cfg = tiny_config();
  ParamStore store(DType::f64, 11);
  Encoder enc(store, "encoder", cfg.encoder, cfg.blocks);
  Tape tape;
  {
    TapeScope scope(tape);
    auto f = enc.forward(constant(oracle::random({2, 64, 64, 1}, 3)), Mode::train);
    tape.backward(sum(f[5]));
  }
  audit_gradient_reach(store);
}

TEST_CASE("decoder stage shape, topology, gradients") {
  DecoderConfig dcfg;
  BlockOptions opts;
  ParamStore store(DType::f32, 1, InitMode::meta);
  DecoderStage st(store, "d5", 512, 512, 512, UpsamplerKind::dsub, 5, dcfg, opts);
  Var y = st.forward(constant(Tensor::meta({1, 4, 4, 512}, DType::f32)), constant(Tensor::meta({1, 8, 8, 512}, DType::f32)),
                     Mode::train);
  CHECK(y.shape() == Shape{1, 8, 8, 512});
  CHECK_THROWS_AS(st.forward(constant(Tensor::meta({1, 4, 4, 512}, DType::f32)),
                             constant(Tensor::meta({1, 4, 4, 512}, DType::f32)), Mode::train),
                  ShapeError);

  ModelConfig cfg;
  cfg.decoder.upsamplers.fill(UpsamplerKind::convtp);
  Model convtp(cfg, DType::f32, 1, InitMode::meta);
  CHECK(any_name_contains(convtp.store(), ".convtp."));
  CHECK(!any_name_contains(convtp.store(), ".dsub."));
  CHECK(!any_name_contains(convtp.store(), ".eub."));

  ParamStore g(DType::f64, 3);
  DecoderStage gs(g, "d", 3, 2, 2, UpsamplerKind::eub, 1, dcfg, {.cam_reduction = 2});
  Var deeper = leaf(oracle::random({1, 4, 4, 3}, 4));
  Var skip = leaf(oracle::random({1, 8, 8, 2}, 5));
  std::vector<GradLeaf> leaves{{"deeper", deeper}, {"skip", skip}};
  for (auto* p : g.parameters()) leaves.push_back({p->name, p->var});
  expect_gradients("decoder_stage", leaves, [&] { return gs.forward(deeper, skip, Mode::train); }, 1e-4,
                   sampled(6));
}

TEST_CASE("segmentation head") {
  ParamStore store(DType::f64, 1);
  SegmentationHead head(store, "head", 8);
  Var f = constant(oracle::random({1, 8, 8, 8}, 2, -4, 4));
  Var y = head.forward(f, 8);
  CHECK(y.shape() == Shape{1, 64, 64, 1});
  for (double v : y.value().to_vector()) CHECK((v > 0 && v < 1));
  head.conv().weight()->mutable_value().fill(0.0);
  for (double v : head.forward(f, 8).value().to_vector()) CHECK(v == 0.5);

  ParamStore g(DType::f64, 3);
  SegmentationHead gh(g, "head", 3);
  Var x = leaf(oracle::random({1, 2, 2, 3}, 4));
  std::vector<GradLeaf> leaves{{"x", x}};
  for (auto* p : g.parameters()) leaves.push_back({p->name, p->var});
  expect_gradients("head", leaves, [&] { return gh.forward(x, 4); }, 1e-5);
}

TEST_CASE("six maps at input resolution") {
  ModelConfig cfg = tiny_config();
  for (auto kind : {UpsamplerKind::dsub, UpsamplerKind::eub, UpsamplerKind::convtp}) {
    cfg.decoder.upsamplers.fill(kind);
    Model m(cfg, DType::f32, 5);
    auto out = m.forward(constant(oracle::random({2, 64, 32, 1}, 6, 0, 1, DType::f32)), Mode::train);
    for (const auto& map : out.maps) {
      CHECK(map.shape() == Shape{2, 64, 32, 1});
      for (double v : map.value().to_vector()) CHECK((v > 0 && v < 1));
    }
    CHECK(out.final().node() == out.maps[5].node());
  }
}

TEST_CASE("deep supervision loss") {
  Tensor target = oracle::random({1, 4, 4, 1}, 1, 0, 1);
  for (std::int64_t i = 0; i < target.numel(); ++i) target.set_item(i, target.item(i) > 0.5 ? 1.0 : 0.0);
  SegmentationOutput half;
  for (auto& m : half.maps) m = constant(Tensor({1, 4, 4, 1}, DType::f64, 0.5));
  CHECK(std::abs(deep_supervision_loss(half, target).total.value().item(0) - 6 * std::log(2.0)) < 1e-12);

  SegmentationOutput perfect;
  for (auto& m : perfect.maps) m = constant(target);
  const double lp = deep_supervision_loss(perfect, target).total.value().item(0);
  CHECK(lp == doctest::Approx(6e-7).epsilon(1e-3));

  SegmentationOutput mixed;
  for (std::size_t i = 0; i < 6; ++i) mixed.maps[i] = constant(oracle::random({1, 4, 4, 1}, 10 + i, 0.05, 0.95));
  SegmentationOutput rotated;
  for (std::size_t i = 0; i < 6; ++i) rotated.maps[i] = mixed.maps[(i + 2) % 6];
  auto a = deep_supervision_loss(mixed, target);
  auto b = deep_supervision_loss(rotated, target);
  CHECK(a.total.value().item(0) == doctest::Approx(b.total.value().item(0)).epsilon(1e-14));
  double sum_terms = 0;
  for (double t : a.terms) sum_terms += t;
  CHECK(a.total.value().item(0) == doctest::Approx(sum_terms).epsilon(1e-14));
  CHECK_THROWS_AS(deep_supervision_loss(half, Tensor({1, 8, 8, 1}, DType::f64)), ShapeError);
}

TEST_CASE("loss gradient reaches every parameter") {
  ModelConfig cfg = tiny_config();
  Model m(cfg, DType::f64, 21);
  Tensor target({2, 64, 64, 1}, DType::f64, 0.0);
  for (std::int64_t i = 0; i < target.numel(); i += 3) target.set_item(i, 1.0);
  Tape tape;
  {
    TapeScope scope(tape);
    auto out = m.forward(constant(oracle::random({2, 64, 64, 1}, 22)), Mode::train);
    tape.backward(deep_supervision_loss(out, target).total);
  }
  audit_gradient_reach(m.store());
}

TEST_CASE("full micro-model gradients") {
  ModelConfig cfg = tiny_config(2);
  cfg.decoder.upsamplers = {UpsamplerKind::dsub, UpsamplerKind::eub, UpsamplerKind::convtp, UpsamplerKind::eub,
                            UpsamplerKind::dsub};
  cfg.blocks.cam_reduction = 2;
  cfg.blocks.attention_token_cap = 64;
  Model m(cfg, DType::f64, 31);
  Var x = leaf(oracle::random({2, 32, 32, 1}, 32));
  Tensor target({2, 32, 32, 1}, DType::f64, 0.0);
  for (std::int64_t i = 0; i < target.numel(); i += 5) target.set_item(i, 1.0);
  // Every fifth parameter tensor plus the input keeps the probe count small.
  std::vector<GradLeaf> leaves{{"x", x}};
  const auto params = m.store().parameters();
  for (std::size_t i = 0; i < params.size(); i += 5) leaves.push_back({params[i]->name, params[i]->var});
  expect_gradients("micro_model", leaves,
                   [&] {
                     auto out = m.forward(x, Mode::train);
                     return deep_supervision_loss(out, target).total;
                   },
                   1e-4, sampled(2));
}
