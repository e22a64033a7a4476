#include "mcads/encoder.hpp"

namespace mcads {

RebnConv::RebnConv(ParamStore& store, const std::string& name, int cin, int cout, int dilation,
                   const BlockOptions& opts)
    : conv_(store, name + ".conv", 3, cin, cout, {.dilation = dilation}), bn_(store, name + ".bn", cout, opts) {}

Var RebnConv::forward(const Var& x, Mode mode) const { return relu(bn_.forward(conv_.forward(x), mode)); }

InnerAttention::InnerAttention(ParamStore& store, const std::string& name, int skip_channels, int up_channels,
                               bool enabled, const BlockOptions& opts) {
  if (enabled) rlab_.emplace(store, name, skip_channels, up_channels, 1, opts);
}

Var InnerAttention::forward(const Var& skip, const Var& up, Mode mode) const {
  if (rlab_) return rlab_->forward(skip, up, mode);
  return concat({skip, up}, 3);
}

Rsu::Rsu(ParamStore& store, const std::string& name, int depth, bool dilated, int cin, int mid, int cout,
         bool inner_attention, const BlockOptions& opts)
    : depth_(depth), dilated_(dilated), name_(name), in_(store, name + ".in", cin, cout, 1, opts) {
  if (depth < 2) throw ShapeError(name + ": RSU depth must be at least 2");
  auto down_dilation = [&](int i) {
    if (dilated) return 1 << i;
    return i == depth - 1 ? 2 : 1;
  };
  for (int i = 0; i < depth; ++i) {
    down_.emplace_back(store, name + ".down" + std::to_string(i + 1), i == 0 ? cout : mid, mid, down_dilation(i),
                       opts);
  }
  // Junction j fuses the output of down[depth - 2 - j] with the feature from below.
  for (int j = 0; j < depth - 1; ++j) {
    const int level = depth - 1 - j;  // 1-based level of the skip
    fuse_.emplace_back(store, name + ".att" + std::to_string(level), mid, mid, inner_attention, opts);
    const int dil = dilated ? 1 << (level - 1) : 1;
    up_.emplace_back(store, name + ".up" + std::to_string(level), 2 * mid, j == depth - 2 ? cout : mid, dil, opts);
  }
}

std::int64_t Rsu::required_divisor() const { return dilated_ ? 1 : std::int64_t{1} << (depth_ - 2); }

Var Rsu::forward(const Var& x, Mode mode) const {
  const Shape& s = x.shape();
  const std::int64_t div = required_divisor();
  if (s.size() != 4 || s[1] % div != 0 || s[2] % div != 0) {
    throw ShapeError(name_ + ": spatial size " + to_string(s) + " must be divisible by " + std::to_string(div) +
                     " for an RSU of depth " + std::to_string(depth_));
  }
  Var hin = in_.forward(x, mode);
  std::vector<Var> skips;
  Var h = hin;
  for (int i = 0; i < depth_; ++i) {
    if (i > 0 && !dilated_ && i < depth_ - 1) h = max_pool2d(h, 2);
    h = down_[static_cast<std::size_t>(i)].forward(h, mode);
    skips.push_back(h);
  }
  Var d = skips.back();
  for (int j = 0; j < depth_ - 1; ++j) {
    const Var& skip = skips[static_cast<std::size_t>(depth_ - 2 - j)];
    if (d.shape()[1] != skip.shape()[1]) d = bilinear_upsample(d, 2);
    d = up_[static_cast<std::size_t>(j)].forward(fuse_[static_cast<std::size_t>(j)].forward(skip, d, mode), mode);
  }
  return add(d, hin);
}

Encoder::Encoder(ParamStore& store, const std::string& name, const EncoderConfig& cfg, const BlockOptions& opts)
    : cfg_(cfg) {
  for (int k = 0; k < 6; ++k) {
    const int cout = cfg.stage_filters[static_cast<std::size_t>(k)];
    if (cout <= 0) throw ShapeError("encoder: stage filters must be positive");
    const int cin = k == 0 ? cfg.input_channels : cfg.stage_filters[static_cast<std::size_t>(k - 1)];
    const int mid = std::max(cout / 2, 1);
    const bool dilated = cfg.dilated_last_two && k >= 4;
    const std::string p = name + ".s" + std::to_string(k);
    Stage st{Rsu(store, p + ".rsu", cfg.rsu_depths[static_cast<std::size_t>(k)], dilated, cin, mid, cout,
                 cfg.inner_attention, opts),
             std::nullopt};
    if (cfg.casab_per_stage) st.casab.emplace(store, p + ".casab", cout, cout, opts);
    stages_.push_back(std::move(st));
  }
}

std::array<Var, 6> Encoder::forward(const Var& image, Mode mode) const {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[3] != cfg_.input_channels) {
    throw ShapeError("encoder: expected (N,H,W," + std::to_string(cfg_.input_channels) + ") input, got " +
                     to_string(s));
  }
  if (s[1] % 32 != 0 || s[2] % 32 != 0) {
    throw ShapeError("encoder: input spatial size " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                     " is not divisible by 32");
  }
  std::array<Var, 6> out;
  Var h = image;
  for (std::size_t k = 0; k < 6; ++k) {
    if (k > 0) h = max_pool2d(out[k - 1], 2);
    Var f = stages_[k].rsu.forward(h, mode);
    if (stages_[k].casab) f = stages_[k].casab->forward(f, mode);
    out[k] = f;
  }
  return out;
}

}  // namespace mcads
