#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mcads/autodiff.hpp"
#include "mcads/tensor.hpp"

namespace mcads {

// Trainable tensor with Adam state. The Var is a leaf that requires grad;
// moment buffers are allocated on the first optimizer step.
struct Parameter {
  std::string name;
  Var var;
  Tensor m, v;
  std::int64_t step = 0;

  const Tensor& value() const { return var.value(); }
  Tensor& mutable_value() { return var.mutable_value(); }
  std::int64_t numel() const { return var.value().numel(); }
};

enum class InitMode {
  random,  // He-uniform weights, zero biases, unit BN scale
  meta,    // shape-only tensors, for parameter / MAC accounting
};

// Weight-initialization rule attached to a parameter at registration.
struct Init {
  enum class Kind { zeros, ones, he_uniform } kind = Kind::zeros;
  std::int64_t fan_in = 0;

  static Init zeros() { return {Kind::zeros, 0}; }
  static Init ones() { return {Kind::ones, 0}; }
  static Init he_uniform(std::int64_t fan_in) { return {Kind::he_uniform, fan_in}; }
};

// Named registry of trainable parameters and non-trainable buffers (batch
// norm running statistics) of one model. Addresses are stable for the
// store's lifetime, so blocks keep raw pointers into it.
class ParamStore {
 public:
  ParamStore(DType dtype, std::uint64_t seed, InitMode mode = InitMode::random);
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter* add(const std::string& name, Shape shape, Init init);
  Tensor* add_buffer(const std::string& name, Shape shape, double fill);

  DType dtype() const { return dtype_; }
  bool meta() const { return mode_ == InitMode::meta; }

  const std::vector<std::unique_ptr<Parameter>>& params() const { return params_; }
  std::vector<Parameter*> parameters() const;
  const std::vector<std::pair<std::string, std::unique_ptr<Tensor>>>& buffers() const { return buffers_; }

  Parameter* find(const std::string& name) const;
  Tensor* find_buffer(const std::string& name) const;

  std::int64_t parameter_count() const;
  // Parameter counts summed by name prefix of the given depth
  // ("decoder.d4.rlab.w" at depth 2 -> "decoder.d4").
  std::map<std::string, std::int64_t> count_by_prefix(int depth) const;

  void zero_grad();

 private:
  void claim(const std::string& name);

  DType dtype_;
  std::uint64_t seed_;
  InitMode mode_;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::map<std::string, int> names_;
};

// Parameter seeds are derived from the model seed and the parameter name,
// so initialization does not depend on construction order.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& name);

}  // namespace mcads
