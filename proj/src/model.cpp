#include "mcads/model.hpp"

namespace mcads {

DecoderStage::DecoderStage(ParamStore& store, const std::string& name, int deeper_channels, int skip_channels,
                           int out_channels, UpsamplerKind upsampler, int rlab_iterations, const DecoderConfig& cfg,
                           const BlockOptions& opts)
    : name_(name) {
  const UpsamplerKind kind = cfg.enable_upsampler ? upsampler : UpsamplerKind::bilinear;
  up_ = make_upsampler(kind, store, name + ".up", deeper_channels, out_channels, opts);
  const int up_channels = kind == UpsamplerKind::bilinear ? deeper_channels : out_channels;
  if (rlab_iterations < 1) throw ShapeError(name + ": RLAB iterations must be positive");
  if (cfg.enable_rlab) rlab_.emplace(store, name + ".rlab", skip_channels, up_channels, rlab_iterations, opts);
  const int fused = skip_channels + up_channels;
  if (cfg.enable_casab) {
    casab_.emplace(store, name + ".casab", fused, out_channels, opts);
  } else {
    project_.emplace(store, name + ".project", 1, fused, out_channels);
  }
}

Var DecoderStage::forward(const Var& deeper, const Var& skip, Mode mode, RlabTrace* trace) const {
  const Shape& ds = deeper.shape();
  const Shape& ss = skip.shape();
  if (ds.size() != 4 || ss.size() != 4 || ds[1] * 2 != ss[1] || ds[2] * 2 != ss[2]) {
    throw ShapeError(name_ + ": deeper feature " + to_string(ds) + " must be half the spatial size of skip " +
                     to_string(ss));
  }
  Var up = up_->forward(deeper, mode);
  Var fused = rlab_ ? rlab_->forward(skip, up, mode, trace) : concat({skip, up}, 3);
  return casab_ ? casab_->forward(fused, mode) : project_->forward(fused);
}

SegmentationHead::SegmentationHead(ParamStore& store, const std::string& name, int channels)
    : conv_(store, name + ".conv", 1, channels, 1) {}

Var SegmentationHead::forward(const Var& feature, int factor) const {
  return bilinear_upsample(sigmoid(conv_.forward(feature)), factor);
}

Decoder::Decoder(ParamStore& store, const std::string& name, const std::array<int, 6>& feature_channels,
                 const DecoderConfig& cfg, const BlockOptions& opts)
    : cfg_(cfg), channels_(feature_channels) {
  // Stage D(5 - i) fuses encoder feature 4 - i; its width mirrors that feature.
  int deeper = feature_channels[5];
  for (int i = 0; i < 5; ++i) {
    const int skip = feature_channels[static_cast<std::size_t>(4 - i)];
    const std::string p = name + ".d" + std::to_string(5 - i);
    stages_.emplace_back(store, p, deeper, skip, skip, cfg.upsamplers[static_cast<std::size_t>(i)],
                         cfg.rlab_iterations[static_cast<std::size_t>(i)], cfg, opts);
    deeper = skip;
  }
  heads_.emplace_back(store, name + ".head_b1", feature_channels[5]);
  for (int i = 0; i < 5; ++i) {
    heads_.emplace_back(store, name + ".head_d" + std::to_string(5 - i), feature_channels[static_cast<std::size_t>(4 - i)]);
  }
}

SegmentationOutput Decoder::forward(const std::array<Var, 6>& features, Mode mode) const {
  for (std::size_t k = 0; k < 6; ++k) {
    const Shape& s = features[k].shape();
    if (s.size() != 4 || s[3] != channels_[k]) {
      throw ShapeError("decoder: feature " + std::to_string(k) + " has shape " + to_string(s) + ", expected " +
                       std::to_string(channels_[k]) + " channels");
    }
    if (k > 0 && (s[1] * 2 != features[k - 1].shape()[1] || s[2] * 2 != features[k - 1].shape()[2])) {
      throw ShapeError("decoder: feature scales must halve per level, got " + to_string(features[k - 1].shape()) +
                       " then " + to_string(s));
    }
  }
  const std::int64_t h = features[0].shape()[1];
  auto factor = [&](const Var& f) { return static_cast<int>(h / f.shape()[1]); };

  SegmentationOutput out;
  out.maps[0] = heads_[0].forward(features[5], factor(features[5]));
  Var d = features[5];
  for (std::size_t i = 0; i < 5; ++i) {
    d = stages_[i].forward(d, features[4 - i], mode);
    out.maps[i + 1] = heads_[i + 1].forward(d, factor(d));
  }
  return out;
}

Model::Model(const ModelConfig& cfg, DType dtype, std::uint64_t seed, InitMode init)
    : cfg_(cfg), store_(std::make_unique<ParamStore>(dtype, seed, init)) {
  encoder_ = std::make_unique<Encoder>(*store_, "encoder", cfg.encoder, cfg.blocks);
  decoder_ = std::make_unique<Decoder>(*store_, "decoder", cfg.encoder.stage_filters, cfg.decoder, cfg.blocks);
}

SegmentationOutput Model::forward(const Var& image, Mode mode) const {
  return decoder_->forward(encoder_->forward(image, mode), mode);
}

LossBreakdown deep_supervision_loss(const SegmentationOutput& out, const Tensor& target) {
  LossBreakdown res;
  for (std::size_t i = 0; i < 6; ++i) {
    Var term = bce_loss(out.maps[i], target);
    res.terms[i] = term.value().is_meta() ? 0.0 : term.value().item(0);
    res.total = i == 0 ? term : add(res.total, term);
  }
  return res;
}

}  // namespace mcads
