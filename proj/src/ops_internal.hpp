#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "mcads/autodiff.hpp"
#include "mcads/ops.hpp"

namespace mcads::detail {

inline void record(const char* op, const Var& out, Tape::BackwardFn fn) {
  if (out.requires_grad()) active_tape()->record(op, out.node(), std::move(fn));
}

inline bool any_meta(std::initializer_list<const Var*> vars) {
  for (const Var* v : vars) {
    if (v && v->defined() && v->value().is_meta()) return true;
  }
  return false;
}

inline void require_rank(const Var& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(rank) + " input, got " +
                     to_string(x.shape()));
  }
}

inline void require_dtype(const Var& a, const Var& b, const char* op) {
  require_same_dtype(a.value(), b.value(), op);
}

// Adds g into the node's gradient if the node is tracked.
inline void push_grad(const std::shared_ptr<Node>& n, const Tensor& g) {
  if (n && n->requires_grad) n->accumulate(g);
}

void add_macs(std::int64_t n);

// FNV-style hash of a boolean/integer pattern, fed to the kink monitor.
struct PatternHash {
  std::uint64_t h = 1469598103934665603ull;
  void add(std::uint64_t v) { h = (h ^ v) * 1099511628211ull; }
};

// Convolution geometry shared by conv2d and conv2d_transpose.
struct ConvGeom {
  std::int64_t n, h, w, cin;    // input of the (forward) convolution
  std::int64_t oh, ow, cout;    // output of the (forward) convolution
  std::int64_t kh, kw;
  std::int64_t stride, dilation, groups;
  std::int64_t pad_top, pad_left;
};

ConvGeom conv_geometry(const Shape& x, const Shape& w, const Conv2dOptions& opts, const char* op);

template <class T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y);
template <class T>
void conv_backward_input(const ConvGeom& g, const T* dy, const T* w, T* dx);
template <class T>
void conv_backward_weight(const ConvGeom& g, const T* x, const T* dy, T* dw);

}  // namespace mcads::detail
