#include "mcads/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mcads/error.hpp"

namespace mcads {

namespace {

struct Grid {
  std::int64_t h, w;
};

Grid mask_grid(const Tensor& m, const char* what) {
  const bool ok = m.rank() == 2 || (m.rank() == 3 && m.dim(2) == 1);
  if (!ok) throw ShapeError(std::string(what) + ": mask must be (H,W) or (H,W,1), got " + to_string(m.shape()));
  for (std::int64_t i = 0; i < m.numel(); ++i) {
    const double v = m.item(i);
    if (v != 0.0 && v != 1.0) {
      throw ShapeError(std::string(what) + ": mask is not binary (value " + std::to_string(v) + " at " +
                       std::to_string(i) + ")");
    }
  }
  return {m.dim(0), m.dim(1)};
}

Grid same_grid(const Tensor& a, const Tensor& b, const char* what) {
  const Grid ga = mask_grid(a, what), gb = mask_grid(b, what);
  if (ga.h != gb.h || ga.w != gb.w) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  return ga;
}

double ratio(std::int64_t num, std::int64_t den, bool both_empty) {
  if (den == 0) return both_empty ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform of a sampled function (lower envelope of
// parabolas). f may contain +inf for "no site".
void edt_1d(const double* f, double* d, std::int64_t n, double s2, std::vector<std::int64_t>& v,
            std::vector<double>& z) {
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n + 1), 0.0);
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const std::int64_t p = v[static_cast<std::size_t>(k)];
      s = ((f[q] + s2 * static_cast<double>(q * q)) - (f[p] + s2 * static_cast<double>(p * p))) /
          (2.0 * s2 * static_cast<double>(q - p));
      if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[static_cast<std::size_t>(k)]) {
      // k == 0 and the new parabola dominates everywhere.
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k + 1)] = kInf;
  }
  if (k < 0) {
    std::fill(d, d + n, kInf);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j + 1)] < static_cast<double>(q)) ++j;
    const std::int64_t p = v[static_cast<std::size_t>(j)];
    d[q] = s2 * static_cast<double>((q - p) * (q - p)) + f[p];
  }
}

// Squared Euclidean distance from every pixel to the nearest site.
std::vector<double> squared_edt(const std::vector<char>& sites, Grid g, double spacing) {
  const double s2 = spacing * spacing;
  std::vector<double> grid(static_cast<std::size_t>(g.h * g.w));
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = sites[i] ? 0.0 : kInf;
  std::vector<std::int64_t> v;
  std::vector<double> z;
  const std::int64_t longest = std::max(g.h, g.w);
  std::vector<double> f(static_cast<std::size_t>(longest)), d(static_cast<std::size_t>(longest));
  for (std::int64_t c = 0; c < g.w; ++c) {
    for (std::int64_t r = 0; r < g.h; ++r) f[static_cast<std::size_t>(r)] = grid[static_cast<std::size_t>(r * g.w + c)];
    edt_1d(f.data(), d.data(), g.h, s2, v, z);
    for (std::int64_t r = 0; r < g.h; ++r) grid[static_cast<std::size_t>(r * g.w + c)] = d[static_cast<std::size_t>(r)];
  }
  for (std::int64_t r = 0; r < g.h; ++r) {
    double* row = grid.data() + r * g.w;
    std::copy_n(row, g.w, f.data());
    edt_1d(f.data(), row, g.w, s2, v, z);
  }
  return grid;
}

std::vector<char> boundary_map(const Tensor& mask, Grid g) {
  auto fg = [&](std::int64_t r, std::int64_t c) {
    return r >= 0 && c >= 0 && r < g.h && c < g.w && mask.item(r * g.w + c) != 0.0;
  };
  std::vector<char> b(static_cast<std::size_t>(g.h * g.w), 0);
  for (std::int64_t r = 0; r < g.h; ++r) {
    for (std::int64_t c = 0; c < g.w; ++c) {
      if (fg(r, c) && (!fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1))) {
        b[static_cast<std::size_t>(r * g.w + c)] = 1;
      }
    }
  }
  return b;
}

void append_directed(const std::vector<char>& from, const std::vector<double>& dist_to, std::vector<double>& out) {
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]) out.push_back(std::sqrt(dist_to[i]));
  }
}

nlohmann::json pixel_json(const PixelMetrics& p) {
  return {{"iou", p.iou}, {"dice", p.dice}, {"precision", p.precision}, {"recall", p.recall}, {"for", p.for_rate}};
}

}  // namespace

Tensor threshold(const Tensor& prob, double t) {
  Tensor out(prob.shape(), prob.dtype());
  for (std::int64_t i = 0; i < prob.numel(); ++i) out.set_item(i, prob.item(i) >= t ? 1.0 : 0.0);
  return out;
}

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt) {
  same_grid(pred, gt, "confusion");
  ConfusionCounts c;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred.item(i) != 0.0, g = gt.item(i) != 0.0;
    if (p && g) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

PixelMetrics pixel_metrics(const ConfusionCounts& c) {
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  PixelMetrics m;
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn, both_empty);
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, both_empty);
  m.precision = ratio(c.tp, c.tp + c.fp, both_empty);
  m.recall = ratio(c.tp, c.tp + c.fn, both_empty);
  m.for_rate = c.fn + c.tn == 0 ? 0.0 : static_cast<double>(c.fn) / static_cast<double>(c.fn + c.tn);
  return m;
}

PixelMetrics pixel_metrics(const Tensor& pred, const Tensor& gt) { return pixel_metrics(confusion(pred, gt)); }

std::vector<std::pair<std::int64_t, std::int64_t>> boundary_pixels(const Tensor& mask) {
  const Grid g = mask_grid(mask, "boundary_pixels");
  const auto b = boundary_map(mask, g);
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t i = 0; i < g.h * g.w; ++i) {
    if (b[static_cast<std::size_t>(i)]) out.emplace_back(i / g.w, i % g.w);
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw NumericError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SurfaceMetrics surface_metrics(const Tensor& pred, const Tensor& gt, double spacing) {
  const Grid g = same_grid(pred, gt, "surface_metrics");
  if (!(spacing > 0)) throw ShapeError("surface_metrics: spacing must be positive");
  const auto bp = boundary_map(pred, g);
  const auto bg = boundary_map(gt, g);
  const bool pred_empty = std::none_of(bp.begin(), bp.end(), [](char c) { return c != 0; });
  const bool gt_empty = std::none_of(bg.begin(), bg.end(), [](char c) { return c != 0; });
  if (pred_empty || gt_empty) {
    throw NumericError(std::string("surface distance undefined: ") +
                       (pred_empty && gt_empty ? "both masks are" : pred_empty ? "prediction is" : "ground truth is") +
                       " empty");
  }
  std::vector<double> pooled;
  append_directed(bp, squared_edt(bg, g, spacing), pooled);
  append_directed(bg, squared_edt(bp, g, spacing), pooled);
  SurfaceMetrics s;
  s.hd95 = percentile(pooled, 95.0);
  s.asd = std::accumulate(pooled.begin(), pooled.end(), 0.0) / static_cast<double>(pooled.size());
  return s;
}

void MetricReport::add(const std::string& id, const Tensor& pred, const Tensor& gt, double spacing) {
  ImageMetrics im;
  im.id = id;
  im.pixel = pixel_metrics(pred, gt);
  try {
    im.surface = surface_metrics(pred, gt, spacing);
  } catch (const NumericError& e) {
    im.surface_error = e.what();
  }
  per_image.push_back(std::move(im));
  finalize();
}

void MetricReport::finalize() {
  mean_pixel = {};
  mean_surface.reset();
  skipped_surface = 0;
  if (per_image.empty()) return;
  SurfaceMetrics acc;
  int surfaced = 0;
  for (const auto& im : per_image) {
    mean_pixel.iou += im.pixel.iou;
    mean_pixel.dice += im.pixel.dice;
    mean_pixel.precision += im.pixel.precision;
    mean_pixel.recall += im.pixel.recall;
    mean_pixel.for_rate += im.pixel.for_rate;
    if (im.surface) {
      acc.hd95 += im.surface->hd95;
      acc.asd += im.surface->asd;
      ++surfaced;
    } else {
      ++skipped_surface;
    }
  }
  const auto n = static_cast<double>(per_image.size());
  mean_pixel.iou /= n;
  mean_pixel.dice /= n;
  mean_pixel.precision /= n;
  mean_pixel.recall /= n;
  mean_pixel.for_rate /= n;
  if (surfaced > 0) mean_surface = SurfaceMetrics{acc.hd95 / surfaced, acc.asd / surfaced};
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& im : per_image) {
    nlohmann::json row = pixel_json(im.pixel);
    row["id"] = im.id;
    if (im.surface) {
      row["hd95"] = im.surface->hd95;
      row["asd"] = im.surface->asd;
    } else {
      row["hd95"] = nullptr;
      row["asd"] = nullptr;
      row["surface_error"] = im.surface_error;
    }
    rows.push_back(std::move(row));
  }
  nlohmann::json agg = pixel_json(mean_pixel);
  agg["images"] = per_image.size();
  agg["hd95"] = mean_surface ? nlohmann::json(mean_surface->hd95) : nlohmann::json(nullptr);
  agg["asd"] = mean_surface ? nlohmann::json(mean_surface->asd) : nlohmann::json(nullptr);
  return {{"per_image", rows}, {"aggregate", agg}, {"skipped_surface", skipped_surface}};
}

}  // namespace mcads
