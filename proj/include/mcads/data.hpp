#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mcads/tensor.hpp"

namespace mcads {

// image: (H,W,C) in [0,1]; mask: (H,W,1) in {0,1}, or undefined when absent.
struct Sample {
  Tensor image;
  Tensor mask;
  std::string id;
};

// ---- NetPBM ----------------------------------------------------------------
// Binary P5 (grayscale) and P6 (RGB) with maxval 255 only.

// (H,W,C) f32 with values v/255; C is 1 for P5 and 3 for P6.
Tensor read_image(const std::filesystem::path& path);
// (H,W,1) f32, 1 where the stored byte is >= 128. RGB files are rejected.
Tensor read_mask(const std::filesystem::path& path);
// Writes round(clamp(v,0,1) * 255); C = 1 -> P5, C = 3 -> P6.
void write_image(const std::filesystem::path& path, const Tensor& image);
// Writes 255 for v >= 0.5, 0 otherwise, as P5.
void write_mask(const std::filesystem::path& path, const Tensor& mask);

// ---- patches ----------------------------------------------------------------

struct PatchGrid {
  std::int64_t height = 0, width = 0;  // original
  std::int64_t padded_height = 0, padded_width = 0;
  int patch = 256;
  int stride = 128;
  std::vector<std::pair<std::int64_t, std::int64_t>> offsets;  // (row, col), row-major
};

// padded extent = smallest size >= max(extent, patch) with
// (size - patch) divisible by stride; offsets enumerate the full lattice.
PatchGrid plan_patches(std::int64_t height, std::int64_t width, int patch, int stride);

// Mirror padding at the bottom and right edges (edge pixel not repeated),
// applied periodically when the pad exceeds the image.
Tensor reflect_pad(const Tensor& image, std::int64_t padded_height, std::int64_t padded_width);

std::vector<Tensor> extract_patches(const Tensor& image, const PatchGrid& grid);
std::vector<Sample> extract_patches(const Sample& sample, const PatchGrid& grid);

// Per-pixel uniform average of every covering patch, cropped to the
// original extent. Patches are (patch, patch, C).
Tensor reassemble(const std::vector<Tensor>& patches, const PatchGrid& grid);

// Number of patches covering each pixel of the padded image, (Hp, Wp, 1).
Tensor coverage(const PatchGrid& grid);

// ---- augmentation -----------------------------------------------------------

// Element of the dihedral group of the square: optional horizontal flip,
// optional vertical flip, then `quarter_turns` counter-clockwise rotations.
struct Dihedral {
  bool flip_h = false;
  bool flip_v = false;
  int quarter_turns = 0;  // 0..3

  bool operator==(const Dihedral&) const = default;
  int index() const { return (flip_h ? 1 : 0) + (flip_v ? 2 : 0) + 4 * quarter_turns; }
};

// (H,W,C) -> transformed; quarter turns swap H and W.
Tensor apply_dihedral(const Tensor& image, const Dihedral& t);

// Horizontal flip, vertical flip and a quarter turn, each with probability
// 0.5. The same transform is applied to image and mask and returned.
Sample augment(const Sample& sample, std::mt19937_64& rng, Dihedral* applied = nullptr);

// ---- datasets ---------------------------------------------------------------

struct SynthOptions {
  int channels = 3;
  double min_foreground = 0.05;
  double max_foreground = 0.5;
};

// Blurred random ellipses ("nuclei") on a textured background. Sample i
// depends only on (seed, i); foreground fraction is kept within the bounds
// by rejection. hw must be divisible by 32.
std::vector<Sample> synth_dataset(int n, int hw, std::uint64_t seed, const SynthOptions& opts = {});

// Layout: <dir>/images/<id>.ppm|.pgm and <dir>/masks/<id>.pgm. Sorted by id.
std::vector<Sample> load_dataset(const std::filesystem::path& dir, bool require_masks = true);
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);

// Deterministic split by sorted id: the last round(fraction * n) samples
// validate, the rest train. At least one sample always trains.
std::pair<std::vector<Sample>, std::vector<Sample>> split_by_id(std::vector<Sample> samples, double val_fraction);

// Stacks samples [begin, end) of `order` into (B,H,W,C) images and
// (B,H,W,1) masks of the given dtype.
std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& order,
                                     std::size_t begin, std::size_t end, DType dtype);

}  // namespace mcads
