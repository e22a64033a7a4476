#include "mcads/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

#include "mcads/parameter.hpp"

namespace mcads {

namespace {

struct NetpbmHeader {
  int channels;
  std::int64_t width, height;
};

std::int64_t read_header_int(std::istream& is, const std::string& path) {
  // Skips whitespace and '#' comments.
  int ch;
  while ((ch = is.peek()) != EOF) {
    if (std::isspace(ch)) {
      is.get();
    } else if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else {
      break;
    }
  }
  std::int64_t v = 0;
  bool any = false;
  while ((ch = is.peek()) != EOF && std::isdigit(ch)) {
    v = v * 10 + (is.get() - '0');
    any = true;
    if (v > (std::int64_t{1} << 31)) throw DataError(path + ": header value out of range");
  }
  if (!any) throw DataError(path + ": malformed NetPBM header");
  return v;
}

NetpbmHeader read_header(std::istream& is, const std::string& path) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw DataError(path + ": not a binary PGM/PPM file (expected P5 or P6)");
  }
  NetpbmHeader h{magic[1] == '5' ? 1 : 3, 0, 0};
  h.width = read_header_int(is, path);
  h.height = read_header_int(is, path);
  const std::int64_t maxval = read_header_int(is, path);
  if (maxval != 255) throw DataError(path + ": maxval " + std::to_string(maxval) + " unsupported (only 255)");
  if (h.width <= 0 || h.height <= 0) throw DataError(path + ": empty image");
  const int sep = is.get();
  if (sep == EOF || !std::isspace(sep)) throw DataError(path + ": malformed NetPBM header");
  return h;
}

std::vector<unsigned char> read_payload(std::istream& is, const NetpbmHeader& h, const std::string& path) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h.width * h.height * h.channels));
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw DataError(path + ": truncated payload");
  }
  return bytes;
}

void write_netpbm(const std::filesystem::path& path, std::int64_t h, std::int64_t w, int channels,
                  const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << (channels == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << '\n' << "255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

void require_hwc(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected (H,W,C), got " + to_string(t.shape()));
}

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image '" + path.string() + "'");
  const auto h = read_header(is, path.string());
  const auto bytes = read_payload(is, h, path.string());
  Tensor t({h.height, h.width, h.channels}, DType::f32);
  auto d = t.data<float>();
  for (std::size_t i = 0; i < bytes.size(); ++i) d[i] = static_cast<float>(bytes[i]) / 255.0f;
  return t;
}

Tensor read_mask(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open mask '" + path.string() + "'");
  const auto h = read_header(is, path.string());
  if (h.channels != 1) throw DataError(path.string() + ": masks must be P5 grayscale");
  const auto bytes = read_payload(is, h, path.string());
  Tensor t({h.height, h.width, 1}, DType::f32);
  auto d = t.data<float>();
  for (std::size_t i = 0; i < bytes.size(); ++i) d[i] = bytes[i] >= 128 ? 1.0f : 0.0f;
  return t;
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  require_hwc(image, "write_image");
  const int c = static_cast<int>(image.dim(2));
  if (c != 1 && c != 3) throw ShapeError("write_image: 1 or 3 channels required, got " + std::to_string(c));
  std::vector<unsigned char> bytes(static_cast<std::size_t>(image.numel()));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.item(static_cast<std::int64_t>(i)), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  write_netpbm(path, image.dim(0), image.dim(1), c, bytes);
}

void write_mask(const std::filesystem::path& path, const Tensor& mask) {
  require_hwc(mask, "write_mask");
  if (mask.dim(2) != 1) throw ShapeError("write_mask: single-channel mask required");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(mask.numel()));
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.item(static_cast<std::int64_t>(i)) >= 0.5 ? 255 : 0;
  write_netpbm(path, mask.dim(0), mask.dim(1), 1, bytes);
}

PatchGrid plan_patches(std::int64_t height, std::int64_t width, int patch, int stride) {
  if (stride < 1 || patch < stride) {
    throw ShapeError("plan_patches: need patch >= stride >= 1, got patch " + std::to_string(patch) + ", stride " +
                     std::to_string(stride));
  }
  if (height < 1 || width < 1) throw ShapeError("plan_patches: empty image");
  auto padded = [&](std::int64_t n) {
    if (n <= patch) return std::int64_t{patch};
    const std::int64_t steps = (n - patch + stride - 1) / stride;
    return patch + steps * stride;
  };
  PatchGrid g;
  g.height = height;
  g.width = width;
  g.padded_height = padded(height);
  g.padded_width = padded(width);
  g.patch = patch;
  g.stride = stride;
  for (std::int64_t r = 0; r + patch <= g.padded_height; r += stride) {
    for (std::int64_t c = 0; c + patch <= g.padded_width; c += stride) g.offsets.emplace_back(r, c);
  }
  return g;
}

Tensor reflect_pad(const Tensor& image, std::int64_t padded_height, std::int64_t padded_width) {
  require_hwc(image, "reflect_pad");
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (padded_height < h || padded_width < w) throw ShapeError("reflect_pad: target smaller than image");
  Tensor out({padded_height, padded_width, c}, image.dtype());
  dispatch(image.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = image.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t r = 0; r < padded_height; ++r) {
      const std::int64_t sr = reflect_index(r, h);
      for (std::int64_t col = 0; col < padded_width; ++col) {
        const std::int64_t sc = reflect_index(col, w);
        std::copy_n(src.data() + (sr * w + sc) * c, c, dst.data() + (r * padded_width + col) * c);
      }
    }
  });
  return out;
}

std::vector<Tensor> extract_patches(const Tensor& image, const PatchGrid& grid) {
  require_hwc(image, "extract_patches");
  if (image.dim(0) != grid.height || image.dim(1) != grid.width) {
    throw ShapeError("extract_patches: image " + to_string(image.shape()) + " does not match the planned grid " +
                     std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  const Tensor padded = reflect_pad(image, grid.padded_height, grid.padded_width);
  const std::int64_t c = image.dim(2), p = grid.patch, pw = grid.padded_width;
  std::vector<Tensor> out;
  out.reserve(grid.offsets.size());
  for (const auto& [r0, c0] : grid.offsets) {
    Tensor t({p, p, c}, image.dtype());
    dispatch(image.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto src = padded.data<T>();
      auto dst = t.data<T>();
      for (std::int64_t r = 0; r < p; ++r) {
        std::copy_n(src.data() + ((r0 + r) * pw + c0) * c, p * c, dst.data() + r * p * c);
      }
    });
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Sample> extract_patches(const Sample& sample, const PatchGrid& grid) {
  auto images = extract_patches(sample.image, grid);
  std::vector<Tensor> masks;
  if (sample.mask.defined()) masks = extract_patches(sample.mask, grid);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back({std::move(images[i]), masks.empty() ? Tensor() : std::move(masks[i]),
                   sample.id + "_p" + std::to_string(i)});
  }
  return out;
}

Tensor coverage(const PatchGrid& grid) {
  Tensor cov({grid.padded_height, grid.padded_width, 1}, DType::f64, 0.0);
  auto d = cov.data<double>();
  for (const auto& [r0, c0] : grid.offsets) {
    for (std::int64_t r = r0; r < r0 + grid.patch; ++r) {
      for (std::int64_t c = c0; c < c0 + grid.patch; ++c) d[static_cast<std::size_t>(r * grid.padded_width + c)] += 1;
    }
  }
  return cov;
}

Tensor reassemble(const std::vector<Tensor>& patches, const PatchGrid& grid) {
  if (patches.size() != grid.offsets.size()) {
    throw ShapeError("reassemble: " + std::to_string(patches.size()) + " patches for " +
                     std::to_string(grid.offsets.size()) + " offsets");
  }
  if (patches.empty()) throw ShapeError("reassemble: no patches");
  const std::int64_t c = patches[0].rank() == 3 ? patches[0].dim(2) : 0;
  const std::int64_t p = grid.patch, pw = grid.padded_width;
  std::vector<double> acc(static_cast<std::size_t>(grid.padded_height * pw * c), 0.0);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Tensor& t = patches[i];
    if (t.shape() != Shape{p, p, c}) {
      throw ShapeError("reassemble: patch " + std::to_string(i) + " has shape " + to_string(t.shape()));
    }
    const auto [r0, c0] = grid.offsets[i];
    for (std::int64_t r = 0; r < p; ++r) {
      for (std::int64_t k = 0; k < p * c; ++k) {
        acc[static_cast<std::size_t>(((r0 + r) * pw + c0) * c + k)] += t.item(r * p * c + k);
      }
    }
  }
  const Tensor cov = coverage(grid);
  Tensor out({grid.height, grid.width, c}, patches[0].dtype());
  for (std::int64_t r = 0; r < grid.height; ++r) {
    for (std::int64_t col = 0; col < grid.width; ++col) {
      const double n = cov.item(r * pw + col);
      for (std::int64_t k = 0; k < c; ++k) {
        out.set_item((r * grid.width + col) * c + k, acc[static_cast<std::size_t>((r * pw + col) * c + k)] / n);
      }
    }
  }
  return out;
}

Tensor apply_dihedral(const Tensor& image, const Dihedral& t) {
  require_hwc(image, "apply_dihedral");
  Tensor cur = image;
  const std::int64_t c = image.dim(2);
  auto remap = [&](std::int64_t oh, std::int64_t ow, auto src_of) {
    const std::int64_t iw = cur.dim(1);
    Tensor out({oh, ow, c}, cur.dtype());
    dispatch(cur.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto s = cur.data<T>();
      auto d = out.data<T>();
      for (std::int64_t r = 0; r < oh; ++r) {
        for (std::int64_t col = 0; col < ow; ++col) {
          const auto [sr, sc] = src_of(r, col);
          std::copy_n(s.data() + (sr * iw + sc) * c, c, d.data() + (r * ow + col) * c);
        }
      }
    });
    cur = std::move(out);
  };
  if (t.flip_h) {
    const std::int64_t w = cur.dim(1);
    remap(cur.dim(0), w, [w](std::int64_t r, std::int64_t col) { return std::pair{r, w - 1 - col}; });
  }
  if (t.flip_v) {
    const std::int64_t h = cur.dim(0);
    remap(h, cur.dim(1), [h](std::int64_t r, std::int64_t col) { return std::pair{h - 1 - r, col}; });
  }
  for (int q = 0; q < ((t.quarter_turns % 4) + 4) % 4; ++q) {
    // Counter-clockwise: out(r, c) = in(c, W - 1 - r).
    const std::int64_t h = cur.dim(0), w = cur.dim(1);
    remap(w, h, [w](std::int64_t r, std::int64_t col) { return std::pair{col, w - 1 - r}; });
  }
  return cur;
}

Sample augment(const Sample& sample, std::mt19937_64& rng, Dihedral* applied) {
  std::bernoulli_distribution coin(0.5);
  Dihedral t;
  t.flip_h = coin(rng);
  t.flip_v = coin(rng);
  t.quarter_turns = coin(rng) ? 1 : 0;
  if (applied) *applied = t;
  return {apply_dihedral(sample.image, t), sample.mask.defined() ? apply_dihedral(sample.mask, t) : Tensor(),
          sample.id};
}

namespace {

struct Ellipse {
  double cy, cx, ry, rx, angle;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = (dx * ca + dy * sa) / rx;
    const double v = (-dx * sa + dy * ca) / ry;
    return u * u + v * v <= 1.0;
  }
};

Sample synth_one(int hw, std::uint64_t seed, const std::string& id, const SynthOptions& opts) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double n = hw;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int count = 3 + static_cast<int>(rng() % 10);
    std::vector<Ellipse> ellipses;
    for (int i = 0; i < count; ++i) {
      ellipses.push_back({u01(rng) * n, u01(rng) * n, n / 20 + u01(rng) * n / 8, n / 20 + u01(rng) * n / 8,
                          u01(rng) * std::numbers::pi});
    }
    Tensor mask({hw, hw, 1}, DType::f32, 0.0);
    std::int64_t fg = 0;
    for (int r = 0; r < hw; ++r) {
      for (int c = 0; c < hw; ++c) {
        for (const auto& e : ellipses) {
          if (e.contains(r + 0.5, c + 0.5)) {
            mask.set_item(r * hw + c, 1.0);
            ++fg;
            break;
          }
        }
      }
    }
    const double frac = static_cast<double>(fg) / (n * n);
    if (frac < opts.min_foreground || frac > opts.max_foreground) continue;

    // Background: low-frequency stripes plus noise; nuclei darker with their
    // own texture; then a 3x3 box blur.
    const double fy = 1 + u01(rng) * 4, fx = 1 + u01(rng) * 4, ph = u01(rng) * 6.28;
    std::normal_distribution<double> noise(0.0, 0.05);
    const int ch = opts.channels;
    std::vector<double> base(static_cast<std::size_t>(ch)), tint(static_cast<std::size_t>(ch));
    for (int k = 0; k < ch; ++k) {
      base[static_cast<std::size_t>(k)] = 0.7 + 0.2 * u01(rng);
      tint[static_cast<std::size_t>(k)] = 0.25 + 0.2 * u01(rng);
    }
    Tensor raw({hw, hw, ch}, DType::f64);
    for (int r = 0; r < hw; ++r) {
      for (int c = 0; c < hw; ++c) {
        const double tex = 0.08 * std::sin(6.28 * (fy * r + fx * c) / n + ph);
        const bool in = mask.item(r * hw + c) > 0.5;
        for (int k = 0; k < ch; ++k) {
          const double v = (in ? tint[static_cast<std::size_t>(k)] : base[static_cast<std::size_t>(k)] + tex) +
                           noise(rng);
          raw.set_item((static_cast<std::int64_t>(r) * hw + c) * ch + k, v);
        }
      }
    }
    Tensor image({hw, hw, ch}, DType::f32);
    for (int r = 0; r < hw; ++r) {
      for (int c = 0; c < hw; ++c) {
        for (int k = 0; k < ch; ++k) {
          double acc = 0;
          int cnt = 0;
          for (int dr = -1; dr <= 1; ++dr) {
            for (int dc = -1; dc <= 1; ++dc) {
              const int rr = r + dr, cc = c + dc;
              if (rr < 0 || cc < 0 || rr >= hw || cc >= hw) continue;
              acc += raw.item((static_cast<std::int64_t>(rr) * hw + cc) * ch + k);
              ++cnt;
            }
          }
          image.set_item((static_cast<std::int64_t>(r) * hw + c) * ch + k, std::clamp(acc / cnt, 0.0, 1.0));
        }
      }
    }
    return {std::move(image), std::move(mask), id};
  }
  throw DataError("synth_dataset: could not meet the foreground bounds for " + id);
}

}  // namespace

std::vector<Sample> synth_dataset(int n, int hw, std::uint64_t seed, const SynthOptions& opts) {
  if (hw <= 0 || hw % 32 != 0) throw ShapeError("synth_dataset: size " + std::to_string(hw) + " not divisible by 32");
  if (opts.channels != 1 && opts.channels != 3) throw ShapeError("synth_dataset: channels must be 1 or 3");
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04d", i);
    out.push_back(synth_one(hw, derive_seed(seed, id), id, opts));
  }
  return out;
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir, bool require_masks) {
  const auto images = dir / "images";
  if (!std::filesystem::is_directory(images)) throw DataError("dataset directory '" + images.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(images)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .ppm/.pgm images in '" + images.string() + "'");
  std::vector<Sample> out;
  std::vector<std::string> missing;
  for (const auto& f : files) {
    Sample s{read_image(f), Tensor(), f.stem().string()};
    const auto m = dir / "masks" / (s.id + ".pgm");
    if (std::filesystem::exists(m)) {
      s.mask = read_mask(m);
      if (s.mask.dim(0) != s.image.dim(0) || s.mask.dim(1) != s.image.dim(1)) {
        throw DataError("mask '" + m.string() + "' size differs from its image");
      }
    } else if (require_masks) {
      missing.push_back(s.id);
    }
    out.push_back(std::move(s));
  }
  if (!missing.empty()) {
    std::string msg = "missing masks for:";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& s : samples) {
    write_image(dir / "images" / (s.id + (s.image.dim(2) == 1 ? ".pgm" : ".ppm")), s.image);
    if (s.mask.defined()) write_mask(dir / "masks" / (s.id + ".pgm"), s.mask);
  }
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_by_id(std::vector<Sample> samples, double val_fraction) {
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  const auto n = static_cast<std::int64_t>(samples.size());
  std::int64_t nval = std::llround(std::clamp(val_fraction, 0.0, 1.0) * static_cast<double>(n));
  nval = std::min(nval, std::max<std::int64_t>(n - 1, 0));
  std::vector<Sample> val(std::make_move_iterator(samples.end() - nval), std::make_move_iterator(samples.end()));
  samples.resize(static_cast<std::size_t>(n - nval));
  return {std::move(samples), std::move(val)};
}

std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& order,
                                     std::size_t begin, std::size_t end, DType dtype) {
  if (begin >= end || end > order.size()) throw ShapeError("make_batch: empty or out-of-range batch");
  const Sample& first = samples[order[begin]];
  const std::int64_t b = static_cast<std::int64_t>(end - begin);
  const std::int64_t h = first.image.dim(0), w = first.image.dim(1), c = first.image.dim(2);
  Tensor images({b, h, w, c}, dtype);
  Tensor masks({b, h, w, 1}, dtype, 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    const Sample& s = samples[order[begin + static_cast<std::size_t>(i)]];
    if (s.image.shape() != first.image.shape()) throw ShapeError("make_batch: samples differ in shape");
    for (std::int64_t k = 0; k < h * w * c; ++k) images.set_item(i * h * w * c + k, s.image.item(k));
    if (s.mask.defined()) {
      for (std::int64_t k = 0; k < h * w; ++k) masks.set_item(i * h * w + k, s.mask.item(k));
    }
  }
  return {std::move(images), std::move(masks)};
}

}  // namespace mcads
