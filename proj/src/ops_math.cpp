#include <algorithm>
#include <cmath>

#include "ops_internal.hpp"

namespace mcads {

using namespace detail;

namespace detail {

namespace {
thread_local std::int64_t g_macs = 0;
}  // namespace

void add_macs(std::int64_t n) { g_macs += n; }

}  // namespace detail

std::int64_t mac_count() { return detail::g_macs; }
void reset_mac_count() { detail::g_macs = 0; }

namespace {

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

// Splits a shape around an axis into (outer, extent, inner) element counts.
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// C (m x n) (+)= A (m x k) * op(B); B is (k x n), or (n x k) when trans_b.
// A may be read transposed (k x m) when trans_a.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (!trans_a && !trans_b) {
    for (std::int64_t i = 0; i < m; ++i) {
      T* cr = c + i * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* br = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::int64_t i = 0; i < m; ++i) {
      const T* ar = a + i * k;
      for (std::int64_t j = 0; j < n; ++j) {
        const T* br = b + j * k;
        T acc = 0;
        for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::int64_t p = 0; p < k; ++p) {
      const T* ar = a + p * m;
      const T* br = b + p * n;
      for (std::int64_t i = 0; i < m; ++i) {
        const T av = ar[i];
        T* cr = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Var softmax(const Var& x, int axis) {
  axis = normalize_axis(axis, x.value().rank(), "softmax");
  if (any_meta({&x})) return make_output(Tensor::meta(x.shape(), x.dtype()), {&x});
  const AxisSplit sp = split_at(x.shape(), axis);
  Tensor y(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xd = x.value().data<T>();
    auto yd = y.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.extent * sp.inner + in;
        T mx = xd[base];
        for (std::int64_t e = 1; e < sp.extent; ++e) mx = std::max(mx, xd[base + e * sp.inner]);
        T total = 0;
        for (std::int64_t e = 0; e < sp.extent; ++e) {
          const T v = std::exp(xd[base + e * sp.inner] - mx);
          yd[base + e * sp.inner] = v;
          total += v;
        }
        for (std::int64_t e = 0; e < sp.extent; ++e) yd[base + e * sp.inner] /= total;
      }
    }
  });
  check_finite(y, "softmax");
  Var out = make_output(std::move(y), {&x});
  record("softmax", out, [sp, xn = x.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    Tensor dx(dy.shape(), dy.dtype());
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto yd = on->value.data<T>();
      auto g = dy.data<T>();
      auto d = dx.data<T>();
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
          const std::int64_t base = o * sp.extent * sp.inner + in;
          T dot = 0;
          for (std::int64_t e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * yd[base + e * sp.inner];
          for (std::int64_t e = 0; e < sp.extent; ++e) {
            const std::int64_t i = base + e * sp.inner;
            d[i] = yd[i] * (g[i] - dot);
          }
        }
      }
    });
    push_grad(xn, dx);
  });
  return out;
}

Var dense(const Var& x, const Var& w, const Var& b) {
  if (x.value().rank() < 1 || w.value().rank() != 2 || x.shape().back() != w.shape()[0]) {
    throw ShapeError("dense: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  require_dtype(x, w, "dense");
  const std::int64_t in = w.shape()[0], outw = w.shape()[1];
  if (b.defined() && (b.value().rank() != 1 || b.shape()[0] != outw)) {
    throw ShapeError("dense: bias " + to_string(b.shape()) + " does not match output width " +
                     std::to_string(outw));
  }
  const std::int64_t rows = x.value().numel() / std::max<std::int64_t>(in, 1);
  Shape ys = x.shape();
  ys.back() = outw;
  add_macs(rows * in * outw);
  if (any_meta({&x, &w, &b})) return make_output(Tensor::meta(ys, x.dtype()), {&x, &w, &b});
  Tensor y(ys, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto yd = y.data<T>();
    if (b.defined()) {
      auto bd = b.value().data<T>();
      for (std::int64_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), yd.begin() + r * outw);
    }
    gemm<T>(false, false, rows, outw, in, x.value().data<T>().data(), w.value().data<T>().data(),
            yd.data(), true);
  });
  check_finite(y, "dense");
  Var out = make_output(std::move(y), {&x, &w, &b});
  record("dense", out, [rows, in, outw, xn = x.node(), wn = w.node(), bn = b.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = dy.data<T>();
      if (xn->requires_grad) {
        Tensor dx(xn->value.shape(), dy.dtype());
        gemm<T>(false, true, rows, in, outw, g.data(), wn->value.data<T>().data(), dx.data<T>().data(), false);
        xn->accumulate(dx);
      }
      if (wn->requires_grad) {
        Tensor dw(wn->value.shape(), dy.dtype());
        gemm<T>(true, false, in, outw, rows, xn->value.data<T>().data(), g.data(), dw.data<T>().data(), false);
        wn->accumulate(dw);
      }
      if (bn && bn->requires_grad) {
        Tensor db({outw}, dy.dtype());
        auto d = db.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < outw; ++j) d[j] += g[r * outw + j];
        }
        bn->accumulate(db);
      }
    });
  });
  return out;
}

Var matmul(const Var& a, const Var& b, bool transpose_b) {
  const int ra = a.value().rank(), rb = b.value().rank();
  if (ra < 2 || ra != rb) {
    throw ShapeError("matmul: operands " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " must have equal rank >= 2");
  }
  require_dtype(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  for (int i = 0; i < ra - 2; ++i) {
    if (sa[i] != sb[i]) throw ShapeError("matmul: batch extents differ: " + to_string(sa) + " vs " + to_string(sb));
  }
  const std::int64_t m = sa[ra - 2], k = sa[ra - 1];
  const std::int64_t kb = transpose_b ? sb[rb - 1] : sb[rb - 2];
  const std::int64_t n = transpose_b ? sb[rb - 2] : sb[rb - 1];
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ: " + to_string(sa) + " x " + to_string(sb) +
                     (transpose_b ? "^T" : ""));
  }
  std::int64_t batch = 1;
  for (int i = 0; i < ra - 2; ++i) batch *= sa[i];
  Shape ys(sa.begin(), sa.end() - 2);
  ys.push_back(m);
  ys.push_back(n);
  add_macs(batch * m * n * k);
  if (any_meta({&a, &b})) return make_output(Tensor::meta(ys, a.dtype()), {&a, &b});
  Tensor y(ys, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* ad = a.value().data<T>().data();
    const T* bd = b.value().data<T>().data();
    T* yd = y.data<T>().data();
    for (std::int64_t i = 0; i < batch; ++i) {
      gemm<T>(false, transpose_b, m, n, k, ad + i * m * k, bd + i * k * n, yd + i * m * n, false);
    }
  });
  check_finite(y, "matmul");
  Var out = make_output(std::move(y), {&a, &b});
  record("matmul", out, [batch, m, n, k, transpose_b, an = a.node(), bn = b.node(), on = out.node()] {
    const Tensor& dy = on->grad;
    dispatch(dy.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = dy.data<T>().data();
      const T* ad = an->value.data<T>().data();
      const T* bd = bn->value.data<T>().data();
      if (an->requires_grad) {
        Tensor da(an->value.shape(), dy.dtype());
        T* d = da.data<T>().data();
        // dA = dC * B^T   (or dC * B when B was used transposed)
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm<T>(false, !transpose_b, m, k, n, g + i * m * n, bd + i * k * n, d + i * m * k, false);
        }
        an->accumulate(da);
      }
      if (bn->requires_grad) {
        Tensor db(bn->value.shape(), dy.dtype());
        T* d = db.data<T>().data();
        for (std::int64_t i = 0; i < batch; ++i) {
          if (transpose_b) {
            // dB (n x k) = dC^T * A
            gemm<T>(true, false, n, k, m, g + i * m * n, ad + i * m * k, d + i * k * n, false);
          } else {
            // dB (k x n) = A^T * dC
            gemm<T>(true, false, k, n, m, ad + i * m * k, g + i * m * n, d + i * k * n, false);
          }
        }
        bn->accumulate(db);
      }
    });
  });
  return out;
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int rank = xs[0].value().rank();
  axis = normalize_axis(axis, rank, "concat");
  Shape ys = xs[0].shape();
  ys[axis] = 0;
  bool meta = false;
  for (const auto& v : xs) {
    const auto& s = v.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && s[i] != xs[0].shape()[i]) {
        throw ShapeError("concat: shapes " + to_string(xs[0].shape()) + " and " + to_string(s) +
                         " differ off the concat axis");
      }
    }
    require_dtype(xs[0], v, "concat");
    ys[axis] += s[axis];
    meta = meta || v.value().is_meta();
  }
  if (meta) return make_output(Tensor::meta(ys, xs[0].dtype()), xs);
  const AxisSplit out_sp = split_at(ys, axis);
  Tensor y(ys, xs[0].dtype());
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& v : xs) {
    offsets.push_back(off);
    off += v.shape()[axis];
  }
  dispatch(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto yd = y.data<T>();
    for (std::size_t t = 0; t < xs.size(); ++t) {
      auto src = xs[t].value().data<T>();
      const std::int64_t block = xs[t].shape()[axis] * out_sp.inner;
      for (std::int64_t o = 0; o < out_sp.outer; ++o) {
        std::copy_n(src.begin() + o * block, block,
                    yd.begin() + o * out_sp.extent * out_sp.inner + offsets[t] * out_sp.inner);
      }
    }
  });
  Var out = make_output(std::move(y), xs);
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& v : xs) nodes.push_back(v.node());
  record("concat", out, [axis, out_sp, offsets, nodes = std::move(nodes), on = out.node()] {
    const Tensor& dy = on->grad;
    for (std::size_t t = 0; t < nodes.size(); ++t) {
      if (!nodes[t]->requires_grad) continue;
      Tensor dx(nodes[t]->value.shape(), dy.dtype());
      dispatch(dy.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto g = dy.data<T>();
        auto d = dx.data<T>();
        const std::int64_t block = nodes[t]->value.shape()[axis] * out_sp.inner;
        for (std::int64_t o = 0; o < out_sp.outer; ++o) {
          std::copy_n(g.begin() + o * out_sp.extent * out_sp.inner + offsets[t] * out_sp.inner, block,
                      d.begin() + o * block);
        }
      });
      nodes[t]->accumulate(dx);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise ops

namespace {

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;  // 0 on broadcast axes
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  }
  const std::size_t r = a.size();
  Broadcast bc;
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    bc.out[i] = std::max(a[i], b[i]);
    if (a[i] == 0 || b[i] == 0) bc.out[i] = 0;
  }
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  std::int64_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    bc.stride_a[i] = a[i] == 1 && bc.out[i] != 1 ? 0 : sa;
    bc.stride_b[i] = b[i] == 1 && bc.out[i] != 1 ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return bc;
}

// Visits every output element with the flat offsets into a and b; the last
// axis is walked in an inner loop.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  if (numel(bc.out) == 0) return;
  if (r == 0) {
    f(0, 0, 0, 1, 0, 0);
    return;
  }
  const std::int64_t inner = bc.out[r - 1];
  const std::int64_t ia = bc.stride_a[r - 1], ib = bc.stride_b[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t out_off = 0;
  while (true) {
    std::int64_t oa = 0, ob = 0;
    for (std::size_t d = 0; d + 1 < r; ++d) {
      oa += idx[d] * bc.stride_a[d];
      ob += idx[d] * bc.stride_b[d];
    }
    f(out_off, oa, ob, inner, ia, ib);
    out_off += inner;
    std::size_t d = r - 1;
    while (d-- > 0) {
      if (++idx[d] < bc.out[d]) break;
      idx[d] = 0;
    }
    if (d == static_cast<std::size_t>(-1)) break;
  }
}

// Sums g (output-shaped) into a tensor of shape `target` along broadcast axes.
Tensor reduce_to(const Tensor& g, const Shape& target, const Broadcast& bc, bool use_a) {
  Tensor out(target, g.dtype());
  dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gd = g.data<T>();
    auto od = out.data<T>();
    for_each_broadcast(bc, [&](std::int64_t o, std::int64_t oa, std::int64_t ob, std::int64_t n,
                               std::int64_t ia, std::int64_t ib) {
      const std::int64_t base = use_a ? oa : ob;
      const std::int64_t step = use_a ? ia : ib;
      for (std::int64_t k = 0; k < n; ++k) od[base + k * step] += gd[o + k];
    });
  });
  return out;
}

enum class Binary { add, mul };

Var binary(Binary kind, const Var& a, const Var& b) {
  const char* op = kind == Binary::add ? "add" : "mul";
  require_dtype(a, b, op);
  Broadcast bc = broadcast_shapes(a.shape(), b.shape(), op);
  if (any_meta({&a, &b})) return make_output(Tensor::meta(bc.out, a.dtype()), {&a, &b});
  Tensor y(bc.out, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto ad = a.value().data<T>();
    auto bd = b.value().data<T>();
    auto yd = y.data<T>();
    for_each_broadcast(bc, [&](std::int64_t o, std::int64_t oa, std::int64_t ob, std::int64_t n,
                               std::int64_t ia, std::int64_t ib) {
      const T* pa = ad.data() + oa;
      const T* pb = bd.data() + ob;
      T* py = yd.data() + o;
      if (kind == Binary::add) {
        for (std::int64_t k = 0; k < n; ++k) py[k] = pa[k * ia] + pb[k * ib];
      } else {
        for (std::int64_t k = 0; k < n; ++k) py[k] = pa[k * ia] * pb[k * ib];
      }
    });
  });
  check_finite(y, op);
  Var out = make_output(std::move(y), {&a, &b});
  record(op, out, [kind, bc, an = a.node(), bn = b.node(), on = out.node()] {
    const Tensor& g = on->grad;
    if (kind == Binary::add) {
      if (an->requires_grad) an->accumulate(an->value.shape() == bc.out ? g : reduce_to(g, an->value.shape(), bc, true));
      if (bn->requires_grad) bn->accumulate(bn->value.shape() == bc.out ? g : reduce_to(g, bn->value.shape(), bc, false));
      return;
    }
    // d(a*b)/da = b (broadcast), reduced back onto a's shape.
    auto partial = [&](const std::shared_ptr<Node>& self, const std::shared_ptr<Node>& other, bool self_is_a) {
      Tensor prod(bc.out, g.dtype());
      dispatch(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gd = g.data<T>();
        auto od = other->value.data<T>();
        auto pd = prod.data<T>();
        for_each_broadcast(bc, [&](std::int64_t o, std::int64_t oa, std::int64_t ob, std::int64_t n,
                                   std::int64_t ia, std::int64_t ib) {
          const std::int64_t base = self_is_a ? ob : oa;
          const std::int64_t step = self_is_a ? ib : ia;
          for (std::int64_t k = 0; k < n; ++k) pd[o + k] = gd[o + k] * od[base + k * step];
        });
      });
      self->accumulate(self->value.shape() == bc.out ? prod : reduce_to(prod, self->value.shape(), bc, self_is_a));
    };
    if (an->requires_grad) partial(an, bn, true);
    if (bn->requires_grad) partial(bn, an, false);
  });
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(Binary::add, a, b); }
Var mul(const Var& a, const Var& b) { return binary(Binary::mul, a, b); }

Var scale(const Var& x, double factor) {
  if (any_meta({&x})) return make_output(Tensor::meta(x.shape(), x.dtype()), {&x});
  Tensor y = x.value();
  y.scale_(factor);
  check_finite(y, "scale");
  Var out = make_output(std::move(y), {&x});
  record("scale", out, [factor, xn = x.node(), on = out.node()] {
    Tensor g = on->grad;
    g.scale_(factor);
    push_grad(xn, g);
  });
  return out;
}

Var reshape(const Var& x, Shape shape) {
  if (numel(shape) != x.value().numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  if (any_meta({&x})) return make_output(Tensor::meta(std::move(shape), x.dtype()), {&x});
  Var out = make_output(x.value().reshaped(shape), {&x});
  record("reshape", out, [xn = x.node(), on = out.node()] {
    push_grad(xn, on->grad.reshaped(xn->value.shape()));
  });
  return out;
}

Var sum(const Var& x) {
  if (any_meta({&x})) return make_output(Tensor::meta({1}, x.dtype()), {&x});
  double acc = 0;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto v : x.value().data<T>()) acc += v;
  });
  Tensor y({1}, x.dtype(), acc);
  check_finite(y, "sum");
  Var out = make_output(std::move(y), {&x});
  record("sum", out, [xn = x.node(), on = out.node()] {
    push_grad(xn, Tensor(xn->value.shape(), on->grad.dtype(), on->grad.item(0)));
  });
  return out;
}

Var mean(const Var& x) {
  const auto n = x.value().numel();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var bce_loss(const Var& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("bce_loss: prediction " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  if (any_meta({&pred})) return make_output(Tensor::meta({1}, pred.dtype()), {&pred});
  const std::int64_t n = pred.value().numel();
  if (n == 0) throw ShapeError("bce_loss: empty prediction");
  const double lo = kBceClamp, hi = 1.0 - kBceClamp;
  const Tensor tgt = target.to(pred.dtype());
  double acc = 0;
  dispatch(pred.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = pred.value().data<T>();
    auto t = tgt.data<T>();
    for (std::int64_t i = 0; i < n; ++i) {
      const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
      const double tv = t[i];
      acc -= tv * std::log(pc) + (1.0 - tv) * std::log(1.0 - pc);
    }
  });
  Tensor y({1}, pred.dtype(), acc / static_cast<double>(n));
  check_finite(y, "bce_loss");
  Var out = make_output(std::move(y), {&pred});
  // The clamp is treated as straight-through: the derivative is evaluated at
  // the clamped probability so saturated outputs still receive a signal.
  record("bce_loss", out, [n, lo, hi, tgt, pn = pred.node(), on = out.node()] {
    const double gscale = on->grad.item(0) / static_cast<double>(n);
    Tensor dp(pn->value.shape(), pn->value.dtype());
    dispatch(dp.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = pn->value.data<T>();
      auto t = tgt.data<T>();
      auto d = dp.data<T>();
      for (std::int64_t i = 0; i < n; ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
        d[i] = static_cast<T>(gscale * (pc - t[i]) / (pc * (1.0 - pc)));
      }
    });
    push_grad(pn, dp);
  });
  return out;
}

}  // namespace mcads
