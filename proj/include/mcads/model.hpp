#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>

#include "mcads/blocks.hpp"
#include "mcads/encoder.hpp"

namespace mcads {

struct DecoderConfig {
  // Upsampler feeding D5, D4, D3, D2, D1 (the "bridge", "s4" ... "s1" slots).
  std::array<UpsamplerKind, 5> upsamplers{UpsamplerKind::dsub, UpsamplerKind::dsub, UpsamplerKind::eub,
                                          UpsamplerKind::eub, UpsamplerKind::eub};
  std::array<int, 5> rlab_iterations{5, 4, 3, 2, 1};
  bool enable_upsampler = true;  // false: parameter-free bilinear x2
  bool enable_rlab = true;       // false: plain concat(skip, up)
  bool enable_casab = true;      // false: 1x1 conv to the stage width
};

inline constexpr std::array<const char*, 5> kUpsamplerSlots{"bridge", "s4", "s3", "s2", "s1"};
inline constexpr std::array<const char*, 6> kHeadNames{"B1", "D5", "D4", "D3", "D2", "D1"};

// upsample(deeper) -> fuse with skip (RLAB or concat) -> CASAB (or 1x1 conv).
class DecoderStage {
 public:
  DecoderStage(ParamStore& store, const std::string& name, int deeper_channels, int skip_channels, int out_channels,
               UpsamplerKind upsampler, int rlab_iterations, const DecoderConfig& cfg, const BlockOptions& opts);
  Var forward(const Var& deeper, const Var& skip, Mode mode, RlabTrace* trace = nullptr) const;

 private:
  std::string name_;
  std::unique_ptr<Upsampler> up_;
  std::optional<Rlab> rlab_;
  std::optional<Casab> casab_;
  std::optional<Conv2d> project_;
};

// 1x1 conv to one channel -> sigmoid -> bilinear upsampling by `factor`.
class SegmentationHead {
 public:
  SegmentationHead(ParamStore& store, const std::string& name, int channels);
  Var forward(const Var& feature, int factor) const;
  const Conv2d& conv() const { return conv_; }

 private:
  Conv2d conv_;
};

struct SegmentationOutput {
  std::array<Var, 6> maps;  // B1, D5, D4, D3, D2, D1; each (N,H,W,1) in (0,1)
  const Var& final() const { return maps[5]; }
};

// Consumes any six-scale pyramid {S1..S5, Bridge} with halving resolution.
class Decoder {
 public:
  Decoder(ParamStore& store, const std::string& name, const std::array<int, 6>& feature_channels,
          const DecoderConfig& cfg, const BlockOptions& opts);
  SegmentationOutput forward(const std::array<Var, 6>& features, Mode mode) const;

  const DecoderConfig& config() const { return cfg_; }

 private:
  DecoderConfig cfg_;
  std::array<int, 6> channels_;
  std::vector<DecoderStage> stages_;  // D5 .. D1
  std::vector<SegmentationHead> heads_;  // B1, D5 .. D1
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  BlockOptions blocks;
};

// Encoder + decoder with their parameters in one store.
class Model {
 public:
  Model(const ModelConfig& cfg, DType dtype, std::uint64_t seed, InitMode init = InitMode::random);
  SegmentationOutput forward(const Var& image, Mode mode) const;

  ParamStore& store() { return *store_; }
  const ParamStore& store() const { return *store_; }
  const ModelConfig& config() const { return cfg_; }
  const Encoder& encoder() const { return *encoder_; }
  const Decoder& decoder() const { return *decoder_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
};

struct LossBreakdown {
  Var total;
  std::array<double, 6> terms{};  // B1, D5 .. D1
};

// Unweighted sum of the six BCE terms against one full-resolution target.
LossBreakdown deep_supervision_loss(const SegmentationOutput& out, const Tensor& target);

}  // namespace mcads
