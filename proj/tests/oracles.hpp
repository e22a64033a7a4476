#pragma once

// Reference implementations used as independent oracles. They share no code
// with the library kernels: plain loops over explicit index formulas.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "mcads/tensor.hpp"

namespace oracle {

using mcads::DType;
using mcads::Shape;
using mcads::Tensor;

inline Tensor random(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1,
                     DType dtype = DType::f64) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape, dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_item(i, u(rng));
  return t;
}

// Values with |v| in [0.1, 1], random sign: keeps relu-like ops away from
// their kink.
inline Tensor random_away_from_zero(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(shape, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_item(i, sign(rng) ? mag(rng) : -mag(rng));
  return t;
}

// Distinct values (a shuffled arithmetic ramp), so max/min have a unique
// argument with a margin.
inline Tensor distinct(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape, DType::f64);
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(v.size());
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t.set_item(static_cast<std::int64_t>(i), v[i]);
  return t;
}

inline std::int64_t at4(const Shape& s, std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) {
  return ((n * s[1] + h) * s[2] + w) * s[3] + c;
}

// Direct convolution with zero padding; 'same' pads (k_eff - 1) split with
// the smaller half on top/left, output extent ceil(in / stride).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, bool same, int dilation,
                     int groups) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::int64_t kh = ws[0], kw = ws[1], cin_g = ws[2], cout = ws[3];
  const std::int64_t ekh = (kh - 1) * dilation + 1, ekw = (kw - 1) * dilation + 1;
  std::int64_t oh, ow, pt = 0, pl = 0;
  if (same) {
    oh = (xs[1] + stride - 1) / stride;
    ow = (xs[2] + stride - 1) / stride;
    pt = std::max<std::int64_t>(0, (oh - 1) * stride + ekh - xs[1]) / 2;
    pl = std::max<std::int64_t>(0, (ow - 1) * stride + ekw - xs[2]) / 2;
  } else {
    oh = (xs[1] - ekh) / stride + 1;
    ow = (xs[2] - ekw) / stride + 1;
  }
  const std::int64_t cout_g = cout / groups;
  Tensor y({xs[0], oh, ow, cout}, DType::f64);
  const Shape ys = y.shape();
  for (std::int64_t n = 0; n < xs[0]; ++n)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j)
        for (std::int64_t co = 0; co < cout; ++co) {
          const std::int64_t g = co / cout_g;
          double acc = b ? b->item(co) : 0.0;
          for (std::int64_t a = 0; a < kh; ++a)
            for (std::int64_t bb = 0; bb < kw; ++bb) {
              const std::int64_t r = i * stride + a * dilation - pt;
              const std::int64_t c = j * stride + bb * dilation - pl;
              if (r < 0 || c < 0 || r >= xs[1] || c >= xs[2]) continue;
              for (std::int64_t ci = 0; ci < cin_g; ++ci) {
                acc += x.item(at4(xs, n, r, c, g * cin_g + ci)) * w.item(((a * kw + bb) * cin_g + ci) * cout + co);
              }
            }
          y.set_item(at4(ys, n, i, j, co), acc);
        }
  return y;
}

// Half-pixel bilinear sample of one axis: returns (i0, i1, frac).
inline void bilinear_axis(std::int64_t o, int factor, std::int64_t in, std::int64_t& i0, std::int64_t& i1,
                          double& frac) {
  double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
  if (src < 0) src = 0;
  i0 = static_cast<std::int64_t>(std::floor(src));
  if (i0 > in - 1) i0 = in - 1;
  i1 = std::min(i0 + 1, in - 1);
  frac = src - static_cast<double>(i0);
  if (i1 == i0) frac = 0;
}

inline Tensor bilinear(const Tensor& x, int factor) {
  const auto& s = x.shape();
  Tensor y({s[0], s[1] * factor, s[2] * factor, s[3]}, DType::f64);
  const Shape ys = y.shape();
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t i = 0; i < ys[1]; ++i)
      for (std::int64_t j = 0; j < ys[2]; ++j)
        for (std::int64_t c = 0; c < s[3]; ++c) {
          std::int64_t r0, r1, c0, c1;
          double fr, fc;
          bilinear_axis(i, factor, s[1], r0, r1, fr);
          bilinear_axis(j, factor, s[2], c0, c1, fc);
          const double v = (1 - fr) * ((1 - fc) * x.item(at4(s, n, r0, c0, c)) + fc * x.item(at4(s, n, r0, c1, c))) +
                           fr * ((1 - fc) * x.item(at4(s, n, r1, c0, c)) + fc * x.item(at4(s, n, r1, c1, c)));
          y.set_item(at4(ys, n, i, j, c), v);
        }
  return y;
}

// ---- metrics ---------------------------------------------------------------

struct MaskCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline MaskCounts count_pixels(const std::vector<int>& pred, const std::vector<int>& gt) {
  MaskCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && gt[i] == 1) c.tp++;
    if (pred[i] == 1 && gt[i] == 0) c.fp++;
    if (pred[i] == 0 && gt[i] == 1) c.fn++;
    if (pred[i] == 0 && gt[i] == 0) c.tn++;
  }
  return c;
}

inline Tensor mask_tensor(const std::vector<int>& m, std::int64_t h, std::int64_t w) {
  Tensor t({h, w, 1}, DType::f32);
  for (std::int64_t i = 0; i < h * w; ++i) t.set_item(i, m[static_cast<std::size_t>(i)]);
  return t;
}

inline std::vector<int> random_mask(std::int64_t h, std::int64_t w, std::uint64_t seed, double p = 0.3) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution on(p);
  std::vector<int> m(static_cast<std::size_t>(h * w));
  for (auto& v : m) v = on(rng) ? 1 : 0;
  return m;
}

// Foreground pixels with a background (or out-of-image) 4-neighbour.
inline std::vector<std::pair<std::int64_t, std::int64_t>> edge_pixels(const std::vector<int>& m, std::int64_t h,
                                                                      std::int64_t w) {
  auto on = [&](std::int64_t r, std::int64_t c) {
    if (r < 0 || c < 0 || r >= h || c >= w) return false;
    return m[static_cast<std::size_t>(r * w + c)] == 1;
  };
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      if (on(r, c) && !(on(r - 1, c) && on(r + 1, c) && on(r, c - 1) && on(r, c + 1))) out.emplace_back(r, c);
  return out;
}

// All-pairs directed distances, pooled both ways; returns {hd95, asd}.
inline std::pair<double, double> surface_all_pairs(const std::vector<int>& a, const std::vector<int>& b,
                                                   std::int64_t h, std::int64_t w) {
  const auto ea = edge_pixels(a, h, w), eb = edge_pixels(b, h, w);
  std::vector<double> d;
  auto directed = [&](const auto& from, const auto& to) {
    for (const auto& [r, c] : from) {
      double best = 1e300;
      for (const auto& [r2, c2] : to) {
        const double dr = static_cast<double>(r - r2), dc = static_cast<double>(c - c2);
        best = std::min(best, std::sqrt(dr * dr + dc * dc));
      }
      d.push_back(best);
    }
  };
  directed(ea, eb);
  directed(eb, ea);
  std::sort(d.begin(), d.end());
  const double rank = 0.95 * static_cast<double>(d.size() - 1);
  const std::size_t k = static_cast<std::size_t>(rank);
  const double hd95 = k + 1 < d.size() ? d[k] + (rank - static_cast<double>(k)) * (d[k + 1] - d[k]) : d[k];
  double sum = 0;
  for (double v : d) sum += v;
  return {hd95, sum / static_cast<double>(d.size())};
}

}  // namespace oracle
