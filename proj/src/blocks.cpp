#include "mcads/blocks.hpp"

#include <cmath>

namespace mcads {

Conv2d::Conv2d(ParamStore& store, const std::string& name, int kernel, int cin, int cout, Conv2dOptions opts,
               bool bias)
    : opts_(opts) {
  if (cin % opts.groups != 0) {
    throw ShapeError(name + ": " + std::to_string(cin) + " input channels not divisible by " +
                     std::to_string(opts.groups) + " groups");
  }
  const int cin_g = cin / opts.groups;
  w_ = store.add(name + ".w", {kernel, kernel, cin_g, cout},
                 Init::he_uniform(static_cast<std::int64_t>(kernel) * kernel * cin_g));
  if (bias) b_ = store.add(name + ".b", {cout}, Init::zeros());
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, w_->var, b_ ? b_->var : Var(), opts_); }

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, int channels, const BlockOptions& opts)
    : gamma_(store.add(name + ".gamma", {channels}, Init::ones())),
      beta_(store.add(name + ".beta", {channels}, Init::zeros())),
      mean_(store.add_buffer(name + ".running_mean", {channels}, 0.0)),
      var_(store.add_buffer(name + ".running_var", {channels}, 1.0)),
      eps_(opts.bn_eps),
      momentum_(opts.bn_momentum) {}

Var BatchNorm::forward(const Var& x, Mode mode) const {
  return batch_norm(x, gamma_->var, beta_->var, *mean_, *var_, {mode, eps_, momentum_});
}

Dense::Dense(ParamStore& store, const std::string& name, int in, int out)
    : w_(store.add(name + ".w", {in, out}, Init::he_uniform(in))), b_(store.add(name + ".b", {out}, Init::zeros())) {}

Var Dense::forward(const Var& x) const { return dense(x, w_->var, b_->var); }

ConvBlock::ConvBlock(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts)
    : dw_(store, name + ".dw", 3, cin, cin, {.groups = cin}),
      bn1_(store, name + ".bn1", cin, opts),
      pw_(store, name + ".pw", 1, cin, cout),
      bn2_(store, name + ".bn2", cout, opts),
      slope_(opts.leaky_slope) {}

Var ConvBlock::forward(const Var& x, Mode mode) const {
  Var h = leaky_relu(bn1_.forward(dw_.forward(x), mode), slope_);
  return leaky_relu(bn2_.forward(pw_.forward(h), mode), slope_);
}

const char* to_string(UpsamplerKind kind) {
  switch (kind) {
    case UpsamplerKind::dsub: return "dsub";
    case UpsamplerKind::eub: return "eub";
    case UpsamplerKind::convtp: return "convtp";
    case UpsamplerKind::bilinear: return "bilinear";
  }
  return "?";
}

UpsamplerKind parse_upsampler(const std::string& name) {
  for (auto k : {UpsamplerKind::dsub, UpsamplerKind::eub, UpsamplerKind::convtp, UpsamplerKind::bilinear}) {
    if (name == to_string(k)) return k;
  }
  throw ShapeError("unknown upsampler '" + name + "' (expected dsub, eub, convtp or bilinear)");
}

Dsub::Dsub(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts)
    : expand_(store, name + ".expand", 3, cin, 4 * cin),
      refine_(store, name + ".refine", 3, cin, cin),
      cb_(store, name + ".cb", cin, cout, opts) {}

Var Dsub::rearranged(const Var& x) const { return depth_to_space(relu(expand_.forward(x)), 2); }

Var Dsub::forward(const Var& x, Mode mode) const {
  return cb_.forward(relu(refine_.forward(rearranged(x))), mode);
}

Eub::Eub(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts)
    : pre_(store, name + ".cb1", cin, cout, opts), post_(store, name + ".cb2", cout, cout, opts) {}

Var Eub::forward(const Var& x, Mode mode) const {
  return post_.forward(bilinear_upsample(pre_.forward(x, mode), 2), mode);
}

ConvTranspose::ConvTranspose(ParamStore& store, const std::string& name, int cin, int cout)
    : w_(store.add(name + ".w", {3, 3, cout, cin}, Init::he_uniform(9LL * cin))),
      b_(store.add(name + ".b", {cout}, Init::zeros())) {}

Var ConvTranspose::forward(const Var& x, Mode) const { return conv2d_transpose(x, w_->var, b_->var, 2); }

Var BilinearUp::forward(const Var& x, Mode) const { return bilinear_upsample(x, 2); }

std::unique_ptr<Upsampler> make_upsampler(UpsamplerKind kind, ParamStore& store, const std::string& name, int cin,
                                          int cout, const BlockOptions& opts) {
  switch (kind) {
    case UpsamplerKind::dsub: return std::make_unique<Dsub>(store, name + ".dsub", cin, cout, opts);
    case UpsamplerKind::eub: return std::make_unique<Eub>(store, name + ".eub", cin, cout, opts);
    case UpsamplerKind::convtp: return std::make_unique<ConvTranspose>(store, name + ".convtp", cin, cout);
    case UpsamplerKind::bilinear: return std::make_unique<BilinearUp>();
  }
  throw ShapeError("make_upsampler: bad kind");
}

namespace {

int hidden_width(int channels, int reduction) { return std::max(channels / std::max(reduction, 1), 1); }

}  // namespace

ChannelAttention::ChannelAttention(ParamStore& store, const std::string& name, int channels, const BlockOptions& opts)
    : fc1_(store, name + ".fc1", channels, hidden_width(channels, opts.cam_reduction)),
      fc2_(store, name + ".fc2", hidden_width(channels, opts.cam_reduction), channels) {}

Var ChannelAttention::gate(const Var& x) const {
  Var s = add(pool_global(GlobalPool::avg, x), pool_global(GlobalPool::max, x));
  return sigmoid(fc2_.forward(swish(fc1_.forward(s))));
}

Var ChannelAttention::forward(const Var& x) const { return mul(x, gate(x)); }

SpatialAttention::SpatialAttention(ParamStore& store, const std::string& name)
    : dw_(store, name + ".dw", 7, 4, 4, {.groups = 4}), pw_(store, name + ".pw", 1, 4, 1) {}

Var SpatialAttention::pooled(const Var& x) {
  return concat({pool_channel(ChannelPool::mean, x), pool_channel(ChannelPool::max, x),
                 pool_channel(ChannelPool::min, x), pool_channel(ChannelPool::sum, x)},
                3);
}

Var SpatialAttention::gate(const Var& x) const { return sigmoid(pw_.forward(swish(dw_.forward(pooled(x))))); }

Var SpatialAttention::forward(const Var& x) const { return mul(x, gate(x)); }

Casab::Casab(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts)
    : refine_(store, name + ".cb", cin, cout, opts),
      cam_(store, name + ".cam", cout, opts),
      sam_(store, name + ".sam") {}

Var Casab::forward(const Var& x, Mode mode) const {
  Var r = refine_.forward(x, mode);
  return add(cam_.forward(r), sam_.forward(r));
}

ResidualBlock::ResidualBlock(ParamStore& store, const std::string& name, int channels, int iterations,
                             const BlockOptions& opts)
    : slope_(opts.leaky_slope) {
  if (iterations < 1) throw ShapeError(name + ": residual block needs at least one iteration");
  for (int i = 0; i < iterations; ++i) {
    const std::string p = name + ".rb" + std::to_string(i + 1);
    steps_.push_back(Step{Conv2d(store, p + ".conv3", 3, channels, channels),
                          Conv2d(store, p + ".conv1", 1, channels, channels), BatchNorm(store, p + ".bn", channels, opts)});
  }
}

Var ResidualBlock::forward(const Var& x, Mode mode) const {
  Var h = x;
  for (const auto& s : steps_) {
    h = s.bn.forward(leaky_relu(add(h, s.conv1.forward(s.conv3.forward(h))), slope_), mode);
  }
  return h;
}

int attention_pool_factor(std::int64_t h, std::int64_t w, int token_cap) {
  int f = 1;
  if (token_cap <= 0) return f;
  while ((h / f) * (w / f) > token_cap && h % (2 * f) == 0 && w % (2 * f) == 0) f *= 2;
  return f;
}

Rlab::Rlab(ParamStore& store, const std::string& name, int skip_channels, int up_channels, int iterations,
           const BlockOptions& opts)
    : channels_(skip_channels + up_channels),
      key_dim_(opts.rlab_key_dim > 0 ? opts.rlab_key_dim : skip_channels + up_channels),
      token_cap_(opts.attention_token_cap),
      rb_(store, name, skip_channels, iterations, opts),
      cb_(store, name + ".cb", channels_, channels_, opts),
      q_(store, name + ".q", channels_, key_dim_),
      k_(store, name + ".k", channels_, key_dim_),
      v_(store, name + ".v", channels_, channels_) {}

Var Rlab::forward(const Var& skip, const Var& up, Mode mode, RlabTrace* trace) const {
  const Shape& ss = skip.shape();
  const Shape& us = up.shape();
  if (ss.size() != 4 || us.size() != 4 || ss[0] != us[0] || ss[1] != us[1] || ss[2] != us[2]) {
    throw ShapeError("rlab: skip " + to_string(ss) + " and up " + to_string(us) + " differ in batch or spatial size");
  }
  Var xbar = concat({rb_.forward(skip, mode), up}, 3);
  Var r = cb_.forward(xbar, mode);

  const int f = attention_pool_factor(ss[1], ss[2], token_cap_);
  if (f > 1) r = avg_pool2d(r, f);
  const std::int64_t n = ss[0], h = ss[1] / f, w = ss[2] / f;
  Var tokens = reshape(r, {n, h * w, channels_});
  Var q = q_.forward(tokens);
  Var k = k_.forward(tokens);
  Var v = v_.forward(tokens);
  Var attn = softmax(scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(key_dim_))), 2);
  Var out = reshape(matmul(attn, v), {n, h, w, channels_});
  if (f > 1) out = bilinear_upsample(out, f);
  if (trace) {
    trace->attention = attn.value();
    trace->xbar = xbar.value();
    trace->pool_factor = f;
  }
  return add(xbar, out);
}

}  // namespace mcads
