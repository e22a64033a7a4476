#include "mcads/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mcads {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

namespace {

void validate_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : Tensor(std::move(shape), dtype, 0.0) {}

Tensor::Tensor(Shape shape, DType dtype, double fill)
    : shape_(std::move(shape)), dtype_(dtype), defined_(true) {
  validate_shape(shape_);
  const auto n = static_cast<std::size_t>(mcads::numel(shape_));
  if (dtype == DType::f32) {
    storage_ = std::vector<float>(n, static_cast<float>(fill));
  } else {
    storage_ = std::vector<double>(n, fill);
  }
}

Tensor Tensor::meta(Shape shape, DType dtype) {
  validate_shape(shape);
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  t.defined_ = true;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  if (mcads::numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values do not fill shape " + to_string(shape));
  }
  Tensor t(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto dst = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item(std::int64_t i) const {
  return dispatch(dtype_, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]);
  });
}

void Tensor::set_item(std::int64_t i, double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    data<T>()[static_cast<std::size_t>(i)] = static_cast<T>(value);
  });
}

double Tensor::scalar() const {
  if (numel() != 1) throw ShapeError("scalar() on tensor of shape " + to_string(shape_));
  return item(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto src = data<T>();
    std::copy(src.begin(), src.end(), out.begin());
  });
  return out;
}

Tensor Tensor::to(DType dtype) const {
  if (is_meta()) return meta(shape_, dtype);
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  dispatch(dtype_, [&](auto src_tag) {
    using S = decltype(src_tag);
    dispatch(dtype, [&](auto dst_tag) {
      using D = decltype(dst_tag);
      auto src = data<S>();
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (mcads::numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::zeros_like() const {
  if (is_meta()) return meta(shape_, dtype_);
  return Tensor(shape_, dtype_);
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::add_(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeError("add_: shape " + to_string(other.shape_) + " vs " + to_string(shape_));
  }
  require_same_dtype(*this, other, "add_");
  if (is_meta()) return;
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    auto s = other.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

void Tensor::scale_(double factor) {
  if (is_meta()) return;
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : data<T>()) v = static_cast<T>(v * factor);
  });
}

bool Tensor::all_finite() const {
  if (is_meta()) return true;
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    // Any NaN/Inf poisons the accumulator (inf * 0 is NaN).
    T acc = 0;
    for (auto v : d) acc += v * T(0);
    return std::isfinite(acc) != 0;
  });
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch (" + to_string(a.dtype()) + " vs " +
                     to_string(b.dtype()) + ")");
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.item(i) - b.item(i)));
  return m;
}

}  // namespace mcads
