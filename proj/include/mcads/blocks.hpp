#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mcads/ops.hpp"
#include "mcads/parameter.hpp"

// Parameterized building blocks. Each block registers its parameters in a
// ParamStore under a dotted name prefix at construction and keeps pointers
// into the store; forward() is const and safe to call concurrently without
// a tape.
namespace mcads {

struct BlockOptions {
  double leaky_slope = 0.01;
  int cam_reduction = 8;
  // RLAB attention runs on at most this many tokens per image; larger maps
  // are average-pooled by a power of two first and the attention output is
  // bilinearly restored. 0 disables the cap.
  int attention_token_cap = 1024;
  // Query/key width; 0 means the post-CB channel width.
  int rlab_key_dim = 0;
  double bn_eps = 1e-3;
  double bn_momentum = 0.99;
};

// ---- layers ---------------------------------------------------------------

class Conv2d {
 public:
  Conv2d(ParamStore& store, const std::string& name, int kernel, int cin, int cout, Conv2dOptions opts = {},
         bool bias = true);
  Var forward(const Var& x) const;

  Parameter* weight() const { return w_; }
  Parameter* bias() const { return b_; }

 private:
  Parameter* w_;
  Parameter* b_ = nullptr;
  Conv2dOptions opts_;
};

class BatchNorm {
 public:
  BatchNorm(ParamStore& store, const std::string& name, int channels, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const;

  Parameter* gamma() const { return gamma_; }
  Parameter* beta() const { return beta_; }

 private:
  Parameter* gamma_;
  Parameter* beta_;
  Tensor* mean_;
  Tensor* var_;
  double eps_, momentum_;
};

class Dense {
 public:
  Dense(ParamStore& store, const std::string& name, int in, int out);
  Var forward(const Var& x) const;

  Parameter* weight() const { return w_; }
  Parameter* bias() const { return b_; }

 private:
  Parameter* w_;
  Parameter* b_;
};

// ---- blocks ---------------------------------------------------------------

// Depthwise 3x3 -> BN -> LeakyReLU -> 1x1 -> BN -> LeakyReLU.
class ConvBlock {
 public:
  ConvBlock(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const;

 private:
  Conv2d dw_;
  BatchNorm bn1_;
  Conv2d pw_;
  BatchNorm bn2_;
  double slope_;
};

enum class UpsamplerKind { dsub, eub, convtp, bilinear };

const char* to_string(UpsamplerKind kind);
UpsamplerKind parse_upsampler(const std::string& name);

// Doubles the spatial extents and maps cin -> cout channels.
class Upsampler {
 public:
  virtual ~Upsampler() = default;
  virtual Var forward(const Var& x, Mode mode) const = 0;
};

// Conv3x3 (C -> 4C) -> ReLU -> depth-to-space(2) -> Conv3x3 (C -> C) -> ReLU -> CB.
class Dsub final : public Upsampler {
 public:
  Dsub(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const override;
  // Output of depth-to-space, before the second convolution.
  Var rearranged(const Var& x) const;

 private:
  Conv2d expand_;
  Conv2d refine_;
  ConvBlock cb_;
};

// CB -> bilinear x2 -> CB.
class Eub final : public Upsampler {
 public:
  Eub(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const override;

 private:
  ConvBlock pre_;
  ConvBlock post_;
};

// 3x3 transposed convolution, stride 2.
class ConvTranspose final : public Upsampler {
 public:
  ConvTranspose(ParamStore& store, const std::string& name, int cin, int cout);
  Var forward(const Var& x, Mode mode) const override;

 private:
  Parameter* w_;
  Parameter* b_;
};

// Parameter-free bilinear x2; channel count is unchanged.
class BilinearUp final : public Upsampler {
 public:
  Var forward(const Var& x, Mode mode) const override;
};

std::unique_ptr<Upsampler> make_upsampler(UpsamplerKind kind, ParamStore& store, const std::string& name, int cin,
                                          int cout, const BlockOptions& opts);

// x * sigmoid(FC(swish(FC(GAP(x) + GMP(x))))), FC widths C -> max(C/r, 1) -> C.
class ChannelAttention {
 public:
  ChannelAttention(ParamStore& store, const std::string& name, int channels, const BlockOptions& opts);
  Var forward(const Var& x) const;
  Var gate(const Var& x) const;  // (N,1,1,C)

  const Dense& fc1() const { return fc1_; }
  const Dense& fc2() const { return fc2_; }

 private:
  Dense fc1_;
  Dense fc2_;
};

// x * sigmoid(Conv1x1(swish(DWConv7x7(pool(x))))) with pool the channel-wise
// concat of mean, max, min and sum.
class SpatialAttention {
 public:
  SpatialAttention(ParamStore& store, const std::string& name);
  Var forward(const Var& x) const;
  Var gate(const Var& x) const;  // (N,H,W,1)
  static Var pooled(const Var& x);  // (N,H,W,4)

 private:
  Conv2d dw_;
  Conv2d pw_;
};

// CB refinement (cin -> cout), then CAM + SAM on the refined map.
class Casab {
 public:
  Casab(ParamStore& store, const std::string& name, int cin, int cout, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const;

  const ChannelAttention& cam() const { return cam_; }
  const SpatialAttention& sam() const { return sam_; }
  const ConvBlock& refine() const { return refine_; }

 private:
  ConvBlock refine_;
  ChannelAttention cam_;
  SpatialAttention sam_;
};

// N iterations of x <- BN(LeakyReLU(x + Conv1x1(Conv3x3(x)))), each with its
// own parameters.
class ResidualBlock {
 public:
  ResidualBlock(ParamStore& store, const std::string& name, int channels, int iterations, const BlockOptions& opts);
  Var forward(const Var& x, Mode mode) const;
  int iterations() const { return static_cast<int>(steps_.size()); }

 private:
  struct Step {
    Conv2d conv3;
    Conv2d conv1;
    BatchNorm bn;
  };
  std::vector<Step> steps_;
  double slope_;
};

struct RlabTrace {
  Tensor attention;  // (N, T, T), rows sum to one
  Tensor xbar;       // concat(RB(skip), up)
  int pool_factor = 1;
};

// xbar = concat(RB(skip), up); out = xbar + Attn(CB(xbar)) with one-head
// scaled dot-product attention over per-pixel tokens.
class Rlab {
 public:
  Rlab(ParamStore& store, const std::string& name, int skip_channels, int up_channels, int iterations,
       const BlockOptions& opts);
  Var forward(const Var& skip, const Var& up, Mode mode, RlabTrace* trace = nullptr) const;

  int channels() const { return channels_; }
  const Dense& value_projection() const { return v_; }

 private:
  int channels_;
  int key_dim_;
  int token_cap_;
  ResidualBlock rb_;
  ConvBlock cb_;
  Dense q_, k_, v_;
};

// Smallest power-of-two pooling factor that brings h*w tokens to the cap.
int attention_pool_factor(std::int64_t h, std::int64_t w, int token_cap);

}  // namespace mcads
