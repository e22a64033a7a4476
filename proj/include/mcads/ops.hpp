#pragma once

#include <cstdint>
#include <vector>

#include "mcads/autodiff.hpp"
#include "mcads/tensor.hpp"

// Differentiable primitives. Feature maps are rank-4 N x H x W x C; every op
// records its backward on the active tape when one of its inputs requires a
// gradient. Outputs are checked for NaN/Inf.
namespace mcads {

enum class Padding { same, valid };
// calibrate: batch statistics like train, but the running statistics are
// overwritten with them instead of blended.
enum class Mode { train, infer, calibrate };

struct Conv2dOptions {
  int stride = 1;
  Padding padding = Padding::same;
  int dilation = 1;
  int groups = 1;
};

// w: (kh, kw, C_in / groups, C_out). b may be an undefined Var (no bias).
Var conv2d(const Var& x, const Var& w, const Var& b, const Conv2dOptions& opts = {});

// Adjoint of a same-padded, strided conv2d. w: (kh, kw, C_out, C_in);
// output spatial extents are the input's multiplied by stride.
Var conv2d_transpose(const Var& x, const Var& w, const Var& b, int stride = 2);

struct BatchNormOptions {
  Mode mode = Mode::train;
  double eps = 1e-3;
  double momentum = 0.99;
};

// Normalizes over every axis but the last. In train mode batch statistics
// are used and the running statistics updated in place.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, const BatchNormOptions& opts);

enum class Activation { relu, leaky_relu, swish, sigmoid };

Var activation(Activation kind, const Var& x, double leaky_slope = 0.01);
inline Var relu(const Var& x) { return activation(Activation::relu, x); }
inline Var leaky_relu(const Var& x, double slope = 0.01) {
  return activation(Activation::leaky_relu, x, slope);
}
inline Var swish(const Var& x) { return activation(Activation::swish, x); }
inline Var sigmoid(const Var& x) { return activation(Activation::sigmoid, x); }

Var softmax(const Var& x, int axis);

enum class GlobalPool { avg, max };
enum class ChannelPool { mean, max, min, sum };

// (N,H,W,C) -> (N,1,1,C)
Var pool_global(GlobalPool kind, const Var& x);
// (N,H,W,C) -> (N,H,W,1)
Var pool_channel(ChannelPool kind, const Var& x);
// Non-overlapping k x k windows; H and W must be divisible by k.
Var max_pool2d(const Var& x, int k);
Var avg_pool2d(const Var& x, int k);

// Half-pixel-center bilinear interpolation (no corner alignment); source
// coordinates below zero clamp to the first row/column.
Var bilinear_upsample(const Var& x, int factor);

// Output pixel (h*b + dy, w*b + dx, c) reads input channel c*b*b + dy*b + dx.
Var depth_to_space(const Var& x, int block);
Var space_to_depth(const Var& x, int block);

// Affine map over the last axis: w is (in, out), b is (out) or undefined.
Var dense(const Var& x, const Var& w, const Var& b);

Var concat(const std::vector<Var>& xs, int axis);

// Elementwise with broadcasting between equal-rank operands (each extent
// equal or 1).
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// Batched matrix product over the last two axes; leading extents must match.
// With transpose_b, b is (..., N, K) and the product is a * b^T.
Var matmul(const Var& a, const Var& b, bool transpose_b = false);

Var scale(const Var& x, double factor);
Var reshape(const Var& x, Shape shape);
Var sum(const Var& x);
Var mean(const Var& x);

inline constexpr double kBceClamp = 1e-7;

// Mean binary cross-entropy; pred is clamped to [1e-7, 1 - 1e-7].
Var bce_loss(const Var& pred, const Tensor& target);

// Wraps a tensor as a non-tracked input.
inline Var constant(Tensor t) { return Var(std::move(t), false); }

// Multiply-accumulate counter for conv / dense / matmul, per thread.
std::int64_t mac_count();
void reset_mac_count();

}  // namespace mcads
