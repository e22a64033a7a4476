#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcads/tensor.hpp"

namespace mcads {

// Masks are (H,W) or (H,W,1) tensors holding exactly 0 or 1.

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

struct PixelMetrics {
  double iou = 0, dice = 0, precision = 0, recall = 0, for_rate = 0;
};

struct SurfaceMetrics {
  double hd95 = 0, asd = 0;
};

// value >= t -> 1, else 0 (ties go to foreground).
Tensor threshold(const Tensor& prob, double t = 0.5);

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt);

// A ratio with an empty denominator is 1 when both masks are empty and 0
// otherwise; FOR with fn + tn = 0 is 0.
PixelMetrics pixel_metrics(const ConfusionCounts& c);
PixelMetrics pixel_metrics(const Tensor& pred, const Tensor& gt);

// Boundary = foreground pixels with a 4-neighbour in the background; pixels
// outside the image count as background.
std::vector<std::pair<std::int64_t, std::int64_t>> boundary_pixels(const Tensor& mask);

// Directed distances from every boundary pixel of each mask to the nearest
// boundary pixel of the other, pooled. HD95 is their 95th percentile with
// linear interpolation between order statistics; ASD is their mean.
// Throws NumericError when either mask is empty.
SurfaceMetrics surface_metrics(const Tensor& pred, const Tensor& gt, double spacing = 1.0);

// Linear-interpolation percentile (q in [0,100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

struct ImageMetrics {
  std::string id;
  PixelMetrics pixel;
  std::optional<SurfaceMetrics> surface;
  std::string surface_error;
};

struct MetricReport {
  std::vector<ImageMetrics> per_image;
  PixelMetrics mean_pixel;
  std::optional<SurfaceMetrics> mean_surface;  // over images with defined surface metrics
  int skipped_surface = 0;

  void add(const std::string& id, const Tensor& pred, const Tensor& gt, double spacing = 1.0);
  // Recomputes the unweighted per-image means.
  void finalize();
  nlohmann::json to_json() const;
};

}  // namespace mcads
