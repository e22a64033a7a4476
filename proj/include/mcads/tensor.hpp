#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mcads/error.hpp"

namespace mcads {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
const char* to_string(DType dtype);

// Dense row-major tensor. Image tensors use the N x H x W x C layout.
//
// A tensor either owns storage (f32 or f64) or is a "meta" tensor that
// carries only shape and dtype. Meta tensors flow through every op without
// computing values; the model summary uses them to count parameters and
// multiply-accumulates for full-size configurations without allocating.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);
  Tensor(Shape shape, DType dtype, double fill);

  static Tensor meta(Shape shape, DType dtype);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f64);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f64);

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::int64_t numel() const { return mcads::numel(shape_); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  bool defined() const { return defined_; }
  bool is_meta() const { return std::holds_alternative<std::monostate>(storage_); }

  template <class T>
  std::span<T> data() {
    return std::span<T>(std::get<std::vector<T>>(storage_));
  }
  template <class T>
  std::span<const T> data() const {
    return std::span<const T>(std::get<std::vector<T>>(storage_));
  }

  // Flat element access through double; convenient for tests and I/O, not
  // for kernels.
  double item(std::int64_t flat_index) const;
  void set_item(std::int64_t flat_index, double value);
  double scalar() const;
  std::vector<double> to_vector() const;

  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;
  Tensor zeros_like() const;

  void fill(double value);
  // this += other (same shape and dtype).
  void add_(const Tensor& other);
  void scale_(double factor);

  bool all_finite() const;

 private:
  Shape shape_;
  DType dtype_ = DType::f32;
  bool defined_ = false;
  std::variant<std::monostate, std::vector<float>, std::vector<double>> storage_;
};

// Calls f(float{}) or f(double{}) depending on the dtype; kernels are
// written once as generic lambdas over the scalar type.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f(float{});
  return f(double{});
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op);

// Max |a - b| over all elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mcads
