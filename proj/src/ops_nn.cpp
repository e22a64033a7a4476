#include <algorithm>
#include <cmath>
#include <limits>

#include "ops_internal.hpp"

namespace mcads {

using namespace detail;

// ---------------------------------------------------------------------------
// Batch normalization

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, const BatchNormOptions& opts) {
  const std::int64_t c = x.shape().empty() ? 0 : x.shape().back();
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma.value(), &beta.value(), &running_mean, &running_var}) {
    if (t->rank() != 1 || t->shape()[0] != c) {
      throw ShapeError("batch_norm: per-channel tensor " + to_string(t->shape()) +
                       " does not match C=" + std::to_string(c) + " of input " + to_string(x.shape()));
    }
  }
  require_dtype(x, gamma, "batch_norm");
  if (any_meta({&x, &gamma, &beta})) return make_output(Tensor::meta(x.shape(), x.dtype()), {&x, &gamma, &beta});

  const std::int64_t rows = x.value().numel() / c;
  Tensor y(x.shape(), x.dtype());
  Tensor xhat(x.shape(), x.dtype());
  Tensor inv_std({c}, x.dtype());
  const bool train = opts.mode != Mode::infer;
  const double momentum = opts.mode == Mode::calibrate ? 0.0 : opts.momentum;
  if (train && rows < 1) throw ShapeError("batch_norm: empty batch");

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto g = gamma.value().data<T>();
    auto bt = beta.value().data<T>();
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    auto is = inv_std.data<T>();
    auto xh = xhat.data<T>();
    auto yd = y.data<T>();
    std::vector<double> mu(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
    if (train) {
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t k = 0; k < c; ++k) mu[k] += xd[r * c + k];
      }
      for (auto& m : mu) m /= static_cast<double>(rows);
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t k = 0; k < c; ++k) {
          const double d = xd[r * c + k] - mu[k];
          var[k] += d * d;
        }
      }
      for (auto& v : var) v /= static_cast<double>(rows);
      for (std::int64_t k = 0; k < c; ++k) {
        rm[k] = static_cast<T>(momentum * rm[k] + (1.0 - momentum) * mu[k]);
        rv[k] = static_cast<T>(momentum * rv[k] + (1.0 - momentum) * var[k]);
      }
    } else {
      for (std::int64_t k = 0; k < c; ++k) {
        mu[k] = rm[k];
        var[k] = rv[k];
      }
    }
    for (std::int64_t k = 0; k < c; ++k) is[k] = static_cast<T>(1.0 / std::sqrt(var[k] + opts.eps));
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t k = 0; k < c; ++k) {
        const T h = static_cast<T>((xd[r * c + k] - mu[k]) * is[k]);
        xh[r * c + k] = h;
        yd[r * c + k] = g[k] * h + bt[k];
      }
    }
  });
  check_finite(y, "batch_norm");
  Var out = make_output(std::move(y), {&x, &gamma, &beta});
  record("batch_norm", out,
         [train, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std), xn = x.node(),
          gn = gamma.node(), bn = beta.node(), on = out.node()] {
           const Tensor& dy = on->grad;
           Tensor dgamma({c}, dy.dtype()), dbeta({c}, dy.dtype());
           Tensor dx(dy.shape(), dy.dtype());
           dispatch(dy.dtype(), [&](auto tag) {
             using T = decltype(tag);
             auto dyd = dy.data<T>();
             auto xh = xhat.data<T>();
             auto is = inv_std.data<T>();
             auto g = gn->value.data<T>();
             auto dg = dgamma.data<T>();
             auto db = dbeta.data<T>();
             auto dxd = dx.data<T>();
             for (std::int64_t r = 0; r < rows; ++r) {
               for (std::int64_t k = 0; k < c; ++k) {
                 db[k] += dyd[r * c + k];
                 dg[k] += dyd[r * c + k] * xh[r * c + k];
               }
             }
             if (!xn->requires_grad) return;
             for (std::int64_t r = 0; r < rows; ++r) {
               for (std::int64_t k = 0; k < c; ++k) {
                 if (train) {
                   const T mean_dy = db[k] / static_cast<T>(rows);
                   const T mean_dy_xh = dg[k] / static_cast<T>(rows);
                   dxd[r * c + k] = g[k] * is[k] * (dyd[r * c + k] - mean_dy - xh[r * c + k] * mean_dy_xh);
                 } else {
                   dxd[r * c + k] = g[k] * is[k] * dyd[r * c + k];
                 }
               }
             }
           });
           push_grad(xn, dx);
           push_grad(gn, dgamma);
           push_grad(bn, dbeta);
         });
  return out;
}

// ---------------------------------------------------------------------------
// Activations

namespace {

template <class T>
T stable_sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// Saturated logits would round to exactly 0 or 1; the open interval is part
// of the head contract, so outputs stay half an epsilon inside it.
template <class T>
T open_unit_sigmoid(T v) {
  constexpr T lo = std::numeric_limits<T>::epsilon() / 2;
  return std::clamp(stable_sigmoid(v), lo, T(1) - lo);
}

const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::swish: return "swish";
    case Activation::sigmoid: return "sigmoid";
  }
  return "activation";
}

}  // namespace

Var activation(Activation kind, const Var& x, double leaky_slope) {
  const char* op = activation_name(kind);
  if (any_meta({&x})) return make_output(Tensor::meta(x.shape(), x.dtype()), {&x});
  Tensor y(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    const T slope = static_cast<T>(leaky_slope);
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0 ? xd[i] : T(0);
        break;
      case Activation::leaky_relu:
        for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0 ? xd[i] : slope * xd[i];
        break;
      case Activation::swish:
        for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] * stable_sigmoid(xd[i]);
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = open_unit_sigmoid(xd[i]);
        break;
    }
    if (KinkMonitor::enabled() && (kind == Activation::relu || kind == Activation::leaky_relu)) {
      PatternHash ph;
      for (auto v : xd) ph.add(v > 0);
      KinkMonitor::record(ph.h);
    }
  });
  check_finite(y, op);
  Var out = make_output(std::move(y), {&x});
  record(op, out, [kind, leaky_slope, xn = x.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    Tensor dx(dy.shape(), dy.dtype());
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto xd = xn->value.data<T>();
      auto yd = on->value.data<T>();
      auto g = dy.data<T>();
      auto d = dx.data<T>();
      const T slope = static_cast<T>(leaky_slope);
      switch (kind) {
        case Activation::relu:
          for (std::size_t i = 0; i < g.size(); ++i) d[i] = xd[i] > 0 ? g[i] : T(0);
          break;
        case Activation::leaky_relu:
          for (std::size_t i = 0; i < g.size(); ++i) d[i] = xd[i] > 0 ? g[i] : slope * g[i];
          break;
        case Activation::swish:
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = stable_sigmoid(xd[i]);
            d[i] = g[i] * (s + xd[i] * s * (T(1) - s));
          }
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * yd[i] * (T(1) - yd[i]);
          break;
      }
    });
    push_grad(xn, dx);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

Var pool_global(GlobalPool kind, const Var& x) {
  require_rank(x, 4, "pool_global");
  const auto& s = x.shape();
  const std::int64_t n = s[0], hw = s[1] * s[2], c = s[3];
  if (hw == 0) throw ShapeError("pool_global: empty spatial extent");
  Shape ys{n, 1, 1, c};
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  Tensor y(ys, x.dtype());
  std::vector<std::int64_t> argmax;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    if (kind == GlobalPool::avg) {
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t p = 0; p < hw; ++p) {
          for (std::int64_t k = 0; k < c; ++k) yd[b * c + k] += xd[(b * hw + p) * c + k];
        }
        for (std::int64_t k = 0; k < c; ++k) yd[b * c + k] /= static_cast<T>(hw);
      }
    } else {
      argmax.assign(static_cast<std::size_t>(n * c), 0);
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t k = 0; k < c; ++k) {
          std::int64_t best = b * hw * c + k;
          for (std::int64_t p = 1; p < hw; ++p) {
            const std::int64_t idx = (b * hw + p) * c + k;
            if (xd[idx] > xd[best]) best = idx;
          }
          argmax[b * c + k] = best;
          yd[b * c + k] = xd[best];
        }
      }
      if (KinkMonitor::enabled()) {
        PatternHash ph;
        for (auto a : argmax) ph.add(static_cast<std::uint64_t>(a));
        KinkMonitor::record(ph.h);
      }
    }
  });
  const char* op = kind == GlobalPool::avg ? "pool_global_avg" : "pool_global_max";
  check_finite(y, op);
  Var out = make_output(std::move(y), {&x});
  record(op, out, [kind, n, hw, c, argmax = std::move(argmax), xn = x.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    Tensor dx(xn->value.shape(), dy.dtype());
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = dy.data<T>();
      auto d = dx.data<T>();
      if (kind == GlobalPool::avg) {
        const T inv = T(1) / static_cast<T>(hw);
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t p = 0; p < hw; ++p) {
            for (std::int64_t k = 0; k < c; ++k) d[(b * hw + p) * c + k] = g[b * c + k] * inv;
          }
        }
      } else {
        for (std::size_t i = 0; i < argmax.size(); ++i) d[argmax[i]] += g[i];
      }
    });
    push_grad(xn, dx);
  });
  return out;
}

Var pool_channel(ChannelPool kind, const Var& x) {
  require_rank(x, 4, "pool_channel");
  const auto& s = x.shape();
  const std::int64_t rows = s[0] * s[1] * s[2], c = s[3];
  if (c == 0) throw ShapeError("pool_channel: zero channels");
  Shape ys{s[0], s[1], s[2], 1};
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  Tensor y(ys, x.dtype());
  std::vector<std::int64_t> arg;
  const bool selects = kind == ChannelPool::max || kind == ChannelPool::min;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    if (selects) arg.resize(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = xd.data() + r * c;
      switch (kind) {
        case ChannelPool::mean:
        case ChannelPool::sum: {
          T acc = 0;
          for (std::int64_t k = 0; k < c; ++k) acc += xr[k];
          yd[r] = kind == ChannelPool::mean ? acc / static_cast<T>(c) : acc;
          break;
        }
        case ChannelPool::max:
        case ChannelPool::min: {
          std::int64_t best = 0;
          for (std::int64_t k = 1; k < c; ++k) {
            if (kind == ChannelPool::max ? xr[k] > xr[best] : xr[k] < xr[best]) best = k;
          }
          arg[r] = best;
          yd[r] = xr[best];
          break;
        }
      }
    }
    if (selects && KinkMonitor::enabled()) {
      PatternHash ph;
      for (auto a : arg) ph.add(static_cast<std::uint64_t>(a));
      KinkMonitor::record(ph.h);
    }
  });
  static constexpr const char* names[] = {"pool_channel_mean", "pool_channel_max", "pool_channel_min",
                                          "pool_channel_sum"};
  const char* op = names[static_cast<int>(kind)];
  check_finite(y, op);
  Var out = make_output(std::move(y), {&x});
  record(op, out, [kind, rows, c, arg = std::move(arg), xn = x.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    Tensor dx(xn->value.shape(), dy.dtype());
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = dy.data<T>();
      auto d = dx.data<T>();
      for (std::int64_t r = 0; r < rows; ++r) {
        switch (kind) {
          case ChannelPool::mean:
            for (std::int64_t k = 0; k < c; ++k) d[r * c + k] = g[r] / static_cast<T>(c);
            break;
          case ChannelPool::sum:
            for (std::int64_t k = 0; k < c; ++k) d[r * c + k] = g[r];
            break;
          default:
            d[r * c + arg[r]] = g[r];
        }
      }
    });
    push_grad(xn, dx);
  });
  return out;
}

namespace {

Shape window_pool_shape(const Var& x, int k, const char* op) {
  require_rank(x, 4, op);
  if (k < 1) throw ShapeError(std::string(op) + ": window must be >= 1");
  const auto& s = x.shape();
  if (s[1] % k != 0 || s[2] % k != 0) {
    throw ShapeError(std::string(op) + ": spatial extents of " + to_string(s) +
                     " not divisible by window " + std::to_string(k));
  }
  return {s[0], s[1] / k, s[2] / k, s[3]};
}

}  // namespace

Var max_pool2d(const Var& x, int k) {
  Shape ys = window_pool_shape(x, k, "max_pool2d");
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  const auto& s = x.shape();
  const std::int64_t n = s[0], h = s[1], w = s[2], c = s[3], oh = ys[1], ow = ys[2];
  Tensor y(ys, x.dtype());
  std::vector<std::int64_t> arg(static_cast<std::size_t>(y.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          const std::int64_t o = ((b * oh + i) * ow + j) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            std::int64_t best = ((b * h + i * k) * w + j * k) * c + ch;
            for (int di = 0; di < k; ++di) {
              for (int dj = 0; dj < k; ++dj) {
                const std::int64_t idx = ((b * h + i * k + di) * w + j * k + dj) * c + ch;
                if (xd[idx] > xd[best]) best = idx;
              }
            }
            arg[o + ch] = best;
            yd[o + ch] = xd[best];
          }
        }
      }
    }
  });
  if (KinkMonitor::enabled()) {
    PatternHash ph;
    for (auto a : arg) ph.add(static_cast<std::uint64_t>(a));
    KinkMonitor::record(ph.h);
  }
  check_finite(y, "max_pool2d");
  Var out = make_output(std::move(y), {&x});
  record("max_pool2d", out, [arg = std::move(arg), xn = x.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    Tensor dx(xn->value.shape(), dy.dtype());
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = dy.data<T>();
      auto d = dx.data<T>();
      for (std::size_t i = 0; i < arg.size(); ++i) d[arg[i]] += g[i];
    });
    push_grad(xn, dx);
  });
  return out;
}

Var avg_pool2d(const Var& x, int k) {
  Shape ys = window_pool_shape(x, k, "avg_pool2d");
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  const auto& s = x.shape();
  const std::int64_t n = s[0], h = s[1], w = s[2], c = s[3], oh = ys[1], ow = ys[2];
  Tensor y(ys, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
          T* yr = yd.data() + ((b * oh + i / k) * ow + j / k) * c;
          const T* xr = xd.data() + ((b * h + i) * w + j) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) yr[ch] += xr[ch] * inv;
        }
      }
    }
  });
  check_finite(y, "avg_pool2d");
  Var out = make_output(std::move(y), {&x});
  record("avg_pool2d", out, [k, n, h, w, c, oh, ow, xn = x.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    Tensor dx(xn->value.shape(), dy.dtype());
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = dy.data<T>();
      auto d = dx.data<T>();
      const T inv = T(1) / static_cast<T>(k * k);
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t i = 0; i < h; ++i) {
          for (std::int64_t j = 0; j < w; ++j) {
            const T* gr = g.data() + ((b * oh + i / k) * ow + j / k) * c;
            T* dr = d.data() + ((b * h + i) * w + j) * c;
            for (std::int64_t ch = 0; ch < c; ++ch) dr[ch] = gr[ch] * inv;
          }
        }
      }
    });
    push_grad(xn, dx);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct Lerp {
  std::int64_t i0, i1;
  double t;  // weight of i1
};

std::vector<Lerp> half_pixel_table(std::int64_t in, int factor) {
  std::vector<Lerp> table(static_cast<std::size_t>(in * factor));
  for (std::int64_t o = 0; o < in * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    table[o] = Lerp{i0, i1, src - static_cast<double>(i0)};
  }
  return table;
}

}  // namespace

Var bilinear_upsample(const Var& x, int factor) {
  require_rank(x, 4, "bilinear_upsample");
  if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
  const auto& s = x.shape();
  const std::int64_t n = s[0], h = s[1], w = s[2], c = s[3];
  const std::int64_t oh = h * factor, ow = w * factor;
  Shape ys{n, oh, ow, c};
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  if (factor == 1) {
    Var out = make_output(x.value(), {&x});
    record("bilinear_upsample", out, [xn = x.node(), on = out.node()] { push_grad(xn, on->grad); });
    return out;
  }
  auto ty = half_pixel_table(h, factor);
  auto tx = half_pixel_table(w, factor);
  Tensor y(ys, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t i = 0; i < oh; ++i) {
        const Lerp& ly = ty[i];
        for (std::int64_t j = 0; j < ow; ++j) {
          const Lerp& lx = tx[j];
          const T w00 = static_cast<T>((1 - ly.t) * (1 - lx.t)), w01 = static_cast<T>((1 - ly.t) * lx.t);
          const T w10 = static_cast<T>(ly.t * (1 - lx.t)), w11 = static_cast<T>(ly.t * lx.t);
          const T* p00 = xd.data() + ((b * h + ly.i0) * w + lx.i0) * c;
          const T* p01 = xd.data() + ((b * h + ly.i0) * w + lx.i1) * c;
          const T* p10 = xd.data() + ((b * h + ly.i1) * w + lx.i0) * c;
          const T* p11 = xd.data() + ((b * h + ly.i1) * w + lx.i1) * c;
          T* yr = yd.data() + ((b * oh + i) * ow + j) * c;
          for (std::int64_t k = 0; k < c; ++k) {
            yr[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
          }
        }
      }
    }
  });
  check_finite(y, "bilinear_upsample");
  Var out = make_output(std::move(y), {&x});
  record("bilinear_upsample", out,
         [n, h, w, c, oh, ow, ty = std::move(ty), tx = std::move(tx), xn = x.node(), on = out.node()] {
           const Tensor& dy = on->grad;
           Tensor dx(xn->value.shape(), dy.dtype());
           dispatch(dy.dtype(), [&](auto tag) {
             using T = decltype(tag);
             auto g = dy.data<T>();
             auto d = dx.data<T>();
             for (std::int64_t b = 0; b < n; ++b) {
               for (std::int64_t i = 0; i < oh; ++i) {
                 const Lerp& ly = ty[i];
                 for (std::int64_t j = 0; j < ow; ++j) {
                   const Lerp& lx = tx[j];
                   const T w00 = static_cast<T>((1 - ly.t) * (1 - lx.t)),
                           w01 = static_cast<T>((1 - ly.t) * lx.t);
                   const T w10 = static_cast<T>(ly.t * (1 - lx.t)), w11 = static_cast<T>(ly.t * lx.t);
                   const T* gr = g.data() + ((b * oh + i) * ow + j) * c;
                   T* p00 = d.data() + ((b * h + ly.i0) * w + lx.i0) * c;
                   T* p01 = d.data() + ((b * h + ly.i0) * w + lx.i1) * c;
                   T* p10 = d.data() + ((b * h + ly.i1) * w + lx.i0) * c;
                   T* p11 = d.data() + ((b * h + ly.i1) * w + lx.i1) * c;
                   for (std::int64_t k = 0; k < c; ++k) {
                     p00[k] += w00 * gr[k];
                     p01[k] += w01 * gr[k];
                     p10[k] += w10 * gr[k];
                     p11[k] += w11 * gr[k];
                   }
                 }
               }
             }
           });
           push_grad(xn, dx);
         });
  return out;
}

namespace {

// Flat-index permutation from the depth layout (N,H,W,C) to the space layout
// (N,H*b,W*b,C/b^2): space[perm[i]] = depth[i].
std::vector<std::int64_t> d2s_permutation(const Shape& depth_shape, int b) {
  const std::int64_t n = depth_shape[0], h = depth_shape[1], w = depth_shape[2], c = depth_shape[3];
  const std::int64_t co = c / (b * b), oh = h * b, ow = w * b;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n * h * w * c));
  for (std::int64_t bn = 0; bn < n; ++bn) {
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        for (std::int64_t k = 0; k < c; ++k) {
          const std::int64_t oc = k / (b * b);
          const std::int64_t dy = (k % (b * b)) / b;
          const std::int64_t dx = k % b;
          const std::int64_t src = ((bn * h + i) * w + j) * c + k;
          const std::int64_t dst = ((bn * oh + i * b + dy) * ow + j * b + dx) * co + oc;
          perm[src] = dst;
        }
      }
    }
  }
  return perm;
}

// out[perm[i]] = in[i] when forward, out[i] = in[perm[i]] otherwise.
Tensor permute(const Tensor& in, const std::vector<std::int64_t>& perm, Shape out_shape, bool forward) {
  Tensor out(std::move(out_shape), in.dtype());
  dispatch(in.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto s = in.data<T>();
    auto d = out.data<T>();
    if (forward) {
      for (std::size_t i = 0; i < perm.size(); ++i) d[perm[i]] = s[i];
    } else {
      for (std::size_t i = 0; i < perm.size(); ++i) d[i] = s[perm[i]];
    }
  });
  return out;
}

}  // namespace

Var depth_to_space(const Var& x, int block) {
  require_rank(x, 4, "depth_to_space");
  if (block < 1) throw ShapeError("depth_to_space: block must be >= 1");
  const auto& s = x.shape();
  if (s[3] % (block * block) != 0) {
    throw ShapeError("depth_to_space: C=" + std::to_string(s[3]) + " not divisible by block^2=" +
                     std::to_string(block * block));
  }
  Shape ys{s[0], s[1] * block, s[2] * block, s[3] / (block * block)};
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  auto perm = d2s_permutation(s, block);
  Tensor y = permute(x.value(), perm, ys, true);
  Var out = make_output(std::move(y), {&x});
  record("depth_to_space", out, [perm = std::move(perm), xn = x.node(), on = out.node()] {
    push_grad(xn, permute(on->grad, perm, xn->value.shape(), false));
  });
  return out;
}

Var space_to_depth(const Var& x, int block) {
  require_rank(x, 4, "space_to_depth");
  if (block < 1) throw ShapeError("space_to_depth: block must be >= 1");
  const auto& s = x.shape();
  if (s[1] % block != 0 || s[2] % block != 0) {
    throw ShapeError("space_to_depth: spatial extents of " + to_string(s) + " not divisible by block " +
                     std::to_string(block));
  }
  Shape ys{s[0], s[1] / block, s[2] / block, s[3] * block * block};
  if (any_meta({&x})) return make_output(Tensor::meta(ys, x.dtype()), {&x});
  auto perm = d2s_permutation(ys, block);
  Tensor y = permute(x.value(), perm, ys, false);
  Var out = make_output(std::move(y), {&x});
  record("space_to_depth", out, [perm = std::move(perm), xn = x.node(), on = out.node()] {
    push_grad(xn, permute(on->grad, perm, xn->value.shape(), true));
  });
  return out;
}

}  // namespace mcads
