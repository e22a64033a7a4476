#include <algorithm>

#include "ops_internal.hpp"

namespace mcads {

namespace detail {

ConvGeom conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& opts, const char* op) {
  if (xs.size() != 4) throw ShapeError(std::string(op) + ": input must be rank 4, got " + to_string(xs));
  if (ws.size() != 4) throw ShapeError(std::string(op) + ": kernel must be rank 4, got " + to_string(ws));
  if (opts.stride < 1 || opts.dilation < 1 || opts.groups < 1) {
    throw ShapeError(std::string(op) + ": stride, dilation and groups must be >= 1");
  }
  ConvGeom g{};
  g.n = xs[0];
  g.h = xs[1];
  g.w = xs[2];
  g.cin = xs[3];
  g.kh = ws[0];
  g.kw = ws[1];
  g.cout = ws[3];
  g.stride = opts.stride;
  g.dilation = opts.dilation;
  g.groups = opts.groups;
  if (g.cin % g.groups != 0) {
    throw ShapeError(std::string(op) + ": groups=" + std::to_string(g.groups) +
                     " does not divide C_in=" + std::to_string(g.cin));
  }
  if (g.cout % g.groups != 0) {
    throw ShapeError(std::string(op) + ": groups=" + std::to_string(g.groups) +
                     " does not divide C_out=" + std::to_string(g.cout));
  }
  if (ws[2] != g.cin / g.groups) {
    throw ShapeError(std::string(op) + ": kernel " + to_string(ws) + " incompatible with input " +
                     to_string(xs) + " and groups=" + std::to_string(g.groups));
  }
  const std::int64_t ekh = (g.kh - 1) * g.dilation + 1;
  const std::int64_t ekw = (g.kw - 1) * g.dilation + 1;
  if (opts.padding == Padding::valid) {
    if (g.h < ekh || g.w < ekw) {
      throw ShapeError(std::string(op) + ": input " + to_string(xs) + " smaller than kernel");
    }
    g.oh = (g.h - ekh) / g.stride + 1;
    g.ow = (g.w - ekw) / g.stride + 1;
    g.pad_top = g.pad_left = 0;
  } else {
    g.oh = (g.h + g.stride - 1) / g.stride;
    g.ow = (g.w + g.stride - 1) / g.stride;
    const std::int64_t ph = std::max<std::int64_t>((g.oh - 1) * g.stride + ekh - g.h, 0);
    const std::int64_t pw = std::max<std::int64_t>((g.ow - 1) * g.stride + ekw - g.w, 0);
    g.pad_top = ph / 2;
    g.pad_left = pw / 2;
  }
  return g;
}

// Kernels walk output pixels and kernel taps; the innermost loops run over
// contiguous channels (channels-last), which the compiler vectorizes.

template <class T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y) {
  const std::int64_t cin_g = g.cin / g.groups;
  const std::int64_t cout_g = g.cout / g.groups;
  const bool depthwise = cin_g == 1 && cout_g == 1;
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oh = 0; oh < g.oh; ++oh) {
      for (std::int64_t ow = 0; ow < g.ow; ++ow) {
        T* yr = y + ((n * g.oh + oh) * g.ow + ow) * g.cout;
        if (b) {
          std::copy(b, b + g.cout, yr);
        } else {
          std::fill(yr, yr + g.cout, T(0));
        }
        for (std::int64_t kh = 0; kh < g.kh; ++kh) {
          const std::int64_t ih = oh * g.stride - g.pad_top + kh * g.dilation;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t kw = 0; kw < g.kw; ++kw) {
            const std::int64_t iw = ow * g.stride - g.pad_left + kw * g.dilation;
            if (iw < 0 || iw >= g.w) continue;
            const T* xr = x + ((n * g.h + ih) * g.w + iw) * g.cin;
            const T* wt = w + (kh * g.kw + kw) * cin_g * g.cout;
            if (depthwise) {
              for (std::int64_t c = 0; c < g.cout; ++c) yr[c] += xr[c] * wt[c];
              continue;
            }
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
              T* yg = yr + grp * cout_g;
              for (std::int64_t ci = 0; ci < cin_g; ++ci) {
                const T xv = xr[grp * cin_g + ci];
                const T* wr = wt + ci * g.cout + grp * cout_g;
                for (std::int64_t co = 0; co < cout_g; ++co) yg[co] += xv * wr[co];
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward_input(const ConvGeom& g, const T* dy, const T* w, T* dx) {
  const std::int64_t cin_g = g.cin / g.groups;
  const std::int64_t cout_g = g.cout / g.groups;
  const bool depthwise = cin_g == 1 && cout_g == 1;
  std::fill(dx, dx + g.n * g.h * g.w * g.cin, T(0));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oh = 0; oh < g.oh; ++oh) {
      for (std::int64_t ow = 0; ow < g.ow; ++ow) {
        const T* dyr = dy + ((n * g.oh + oh) * g.ow + ow) * g.cout;
        for (std::int64_t kh = 0; kh < g.kh; ++kh) {
          const std::int64_t ih = oh * g.stride - g.pad_top + kh * g.dilation;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t kw = 0; kw < g.kw; ++kw) {
            const std::int64_t iw = ow * g.stride - g.pad_left + kw * g.dilation;
            if (iw < 0 || iw >= g.w) continue;
            T* dxr = dx + ((n * g.h + ih) * g.w + iw) * g.cin;
            const T* wt = w + (kh * g.kw + kw) * cin_g * g.cout;
            if (depthwise) {
              for (std::int64_t c = 0; c < g.cout; ++c) dxr[c] += wt[c] * dyr[c];
              continue;
            }
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
              const T* dyg = dyr + grp * cout_g;
              for (std::int64_t ci = 0; ci < cin_g; ++ci) {
                const T* wr = wt + ci * g.cout + grp * cout_g;
                T acc = 0;
                for (std::int64_t co = 0; co < cout_g; ++co) acc += wr[co] * dyg[co];
                dxr[grp * cin_g + ci] += acc;
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward_weight(const ConvGeom& g, const T* x, const T* dy, T* dw) {
  const std::int64_t cin_g = g.cin / g.groups;
  const std::int64_t cout_g = g.cout / g.groups;
  const bool depthwise = cin_g == 1 && cout_g == 1;
  std::fill(dw, dw + g.kh * g.kw * cin_g * g.cout, T(0));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oh = 0; oh < g.oh; ++oh) {
      for (std::int64_t ow = 0; ow < g.ow; ++ow) {
        const T* dyr = dy + ((n * g.oh + oh) * g.ow + ow) * g.cout;
        for (std::int64_t kh = 0; kh < g.kh; ++kh) {
          const std::int64_t ih = oh * g.stride - g.pad_top + kh * g.dilation;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t kw = 0; kw < g.kw; ++kw) {
            const std::int64_t iw = ow * g.stride - g.pad_left + kw * g.dilation;
            if (iw < 0 || iw >= g.w) continue;
            const T* xr = x + ((n * g.h + ih) * g.w + iw) * g.cin;
            T* dwt = dw + (kh * g.kw + kw) * cin_g * g.cout;
            if (depthwise) {
              for (std::int64_t c = 0; c < g.cout; ++c) dwt[c] += xr[c] * dyr[c];
              continue;
            }
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
              const T* dyg = dyr + grp * cout_g;
              for (std::int64_t ci = 0; ci < cin_g; ++ci) {
                const T xv = xr[grp * cin_g + ci];
                T* dwr = dwt + ci * g.cout + grp * cout_g;
                for (std::int64_t co = 0; co < cout_g; ++co) dwr[co] += xv * dyg[co];
              }
            }
          }
        }
      }
    }
  }
}

template void conv_forward<float>(const ConvGeom&, const float*, const float*, const float*, float*);
template void conv_forward<double>(const ConvGeom&, const double*, const double*, const double*, double*);
template void conv_backward_input<float>(const ConvGeom&, const float*, const float*, float*);
template void conv_backward_input<double>(const ConvGeom&, const double*, const double*, double*);
template void conv_backward_weight<float>(const ConvGeom&, const float*, const float*, float*);
template void conv_backward_weight<double>(const ConvGeom&, const double*, const double*, double*);

namespace {

std::int64_t conv_macs(const ConvGeom& g) {
  return g.n * g.oh * g.ow * g.kh * g.kw * (g.cin / g.groups) * g.cout;
}

// Sum of dy over every axis but the last.
Tensor channel_sum(const Tensor& dy) {
  const std::int64_t c = dy.shape().back();
  Tensor out({c}, dy.dtype());
  dispatch(dy.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = dy.data<T>();
    auto dst = out.data<T>();
    const std::int64_t rows = dy.numel() / c;
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t k = 0; k < c; ++k) dst[k] += src[r * c + k];
    }
  });
  return out;
}

void check_bias(const Var& b, std::int64_t channels, const char* op) {
  if (!b.defined()) return;
  if (b.value().rank() != 1 || b.shape()[0] != channels) {
    throw ShapeError(std::string(op) + ": bias shape " + to_string(b.shape()) + " does not match " +
                     std::to_string(channels) + " output channels");
  }
}

}  // namespace

}  // namespace detail

Var conv2d(const Var& x, const Var& w, const Var& b, const Conv2dOptions& opts) {
  using namespace detail;
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), opts, "conv2d");
  require_dtype(x, w, "conv2d");
  check_bias(b, g.cout, "conv2d");
  add_macs(conv_macs(g));
  Shape ys{g.n, g.oh, g.ow, g.cout};
  if (any_meta({&x, &w, &b})) return make_output(Tensor::meta(ys, x.dtype()), {&x, &w, &b});

  Tensor y(ys, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    conv_forward<T>(g, x.value().data<T>().data(), w.value().data<T>().data(),
                    b.defined() ? b.value().data<T>().data() : nullptr, y.data<T>().data());
  });
  check_finite(y, "conv2d");
  Var out = make_output(std::move(y), {&x, &w, &b});
  record("conv2d", out,
         [g, xn = x.node(), wn = w.node(), bn = b.node(), on = out.node()] {
           const Tensor& dy = on->grad;
           dispatch(dy.dtype(), [&](auto tag) {
             using T = decltype(tag);
             if (xn->requires_grad) {
               Tensor dx(xn->value.shape(), dy.dtype());
               conv_backward_input<T>(g, dy.data<T>().data(), wn->value.data<T>().data(),
                                      dx.data<T>().data());
               xn->accumulate(dx);
             }
             if (wn->requires_grad) {
               Tensor dw(wn->value.shape(), dy.dtype());
               conv_backward_weight<T>(g, xn->value.data<T>().data(), dy.data<T>().data(),
                                       dw.data<T>().data());
               wn->accumulate(dw);
             }
           });
           if (bn) push_grad(bn, channel_sum(dy));
         });
  return out;
}

Var conv2d_transpose(const Var& x, const Var& w, const Var& b, int stride) {
  using namespace detail;
  require_rank(x, 4, "conv2d_transpose");
  if (stride < 1) throw ShapeError("conv2d_transpose: stride must be >= 1");
  require_dtype(x, w, "conv2d_transpose");
  if (w.value().rank() != 4 || w.shape()[3] != x.shape()[3]) {
    throw ShapeError("conv2d_transpose: kernel " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  // The equivalent forward convolution maps the (larger) transpose output
  // back onto the transpose input.
  const Shape conv_in{x.shape()[0], x.shape()[1] * stride, x.shape()[2] * stride, w.shape()[2]};
  Conv2dOptions opts;
  opts.stride = stride;
  const ConvGeom g = conv_geometry(conv_in, w.shape(), opts, "conv2d_transpose");
  check_bias(b, g.cin, "conv2d_transpose");
  add_macs(conv_macs(g));
  if (any_meta({&x, &w, &b})) return make_output(Tensor::meta(conv_in, x.dtype()), {&x, &w, &b});

  Tensor y(conv_in, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    conv_backward_input<T>(g, x.value().data<T>().data(), w.value().data<T>().data(),
                           y.data<T>().data());
    if (b.defined()) {
      auto yd = y.data<T>();
      auto bd = b.value().data<T>();
      const std::int64_t c = g.cin;
      for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += bd[i % static_cast<std::size_t>(c)];
    }
  });
  check_finite(y, "conv2d_transpose");
  Var out = make_output(std::move(y), {&x, &w, &b});
  record("conv2d_transpose", out,
         [g, xn = x.node(), wn = w.node(), bn = b.node(), on = out.node()] {
           const Tensor& dy = on->grad;
           dispatch(dy.dtype(), [&](auto tag) {
             using T = decltype(tag);
             if (xn->requires_grad) {
               Tensor dx(xn->value.shape(), dy.dtype());
               conv_forward<T>(g, dy.data<T>().data(), wn->value.data<T>().data(), nullptr,
                               dx.data<T>().data());
               xn->accumulate(dx);
             }
             if (wn->requires_grad) {
               Tensor dw(wn->value.shape(), dy.dtype());
               conv_backward_weight<T>(g, dy.data<T>().data(), xn->value.data<T>().data(),
                                       dw.data<T>().data());
               wn->accumulate(dw);
             }
           });
           if (bn) push_grad(bn, channel_sum(dy));
         });
  return out;
}

}  // namespace mcads
