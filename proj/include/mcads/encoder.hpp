#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mcads/blocks.hpp"

namespace mcads {

struct EncoderConfig {
  std::array<int, 6> stage_filters{64, 128, 256, 512, 512, 512};
  std::array<int, 6> rsu_depths{7, 6, 5, 4, 4, 4};
  bool dilated_last_two = true;
  bool inner_attention = true;
  bool casab_per_stage = true;
  int input_channels = 3;
};

// Conv3x3 (dilated) -> BN -> ReLU.
class RebnConv {
 public:
  RebnConv(ParamStore& store, const std::string& name, int cin, int cout, int dilation, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const;

 private:
  Conv2d conv_;
  BatchNorm bn_;
};

// Fusion of an internal skip with the feature coming up from below:
// concat(skip, up), or an RLAB with one residual iteration when attention is
// enabled. Output channels are skip + up either way.
class InnerAttention {
 public:
  InnerAttention(ParamStore& store, const std::string& name, int skip_channels, int up_channels, bool enabled,
                 const BlockOptions& opts);
  Var forward(const Var& skip, const Var& up, Mode mode) const;
  const Rlab* rlab() const { return rlab_ ? &*rlab_ : nullptr; }

 private:
  std::optional<Rlab> rlab_;
};

// Residual U-block of depth L. The pooled variant halves the resolution
// L - 2 times inside the block; the dilated variant keeps it and grows the
// dilation 1, 2, 4, ... instead. Output = U(in_conv(x)) + in_conv(x).
class Rsu {
 public:
  Rsu(ParamStore& store, const std::string& name, int depth, bool dilated, int cin, int mid, int cout,
      bool inner_attention, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const;

  int depth() const { return depth_; }
  bool dilated() const { return dilated_; }
  // Spatial extents must be divisible by this (pooled variant).
  std::int64_t required_divisor() const;

 private:
  int depth_;
  bool dilated_;
  std::string name_;
  RebnConv in_;
  std::vector<RebnConv> down_;  // depth entries; the last one is dilated
  std::vector<InnerAttention> fuse_;  // depth - 1 junctions, deepest first
  std::vector<RebnConv> up_;  // depth - 1 entries, deepest first
};

// Six-stage encoder. Stage k: RSU, then CASAB when enabled; stages 0..4 are
// followed by 2x2 max pooling into the next stage. Returns
// {S1, S2, S3, S4, S5, Bridge}.
class Encoder {
 public:
  Encoder(ParamStore& store, const std::string& name, const EncoderConfig& cfg, const BlockOptions& opts);
  std::array<Var, 6> forward(const Var& image, Mode mode) const;

  const EncoderConfig& config() const { return cfg_; }
  const Rsu& stage(int k) const { return stages_[static_cast<std::size_t>(k)].rsu; }

 private:
  struct Stage {
    Rsu rsu;
    std::optional<Casab> casab;
  };
  EncoderConfig cfg_;
  std::vector<Stage> stages_;
};

}  // namespace mcads
