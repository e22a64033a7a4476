#include "mcads/parameter.hpp"

#include <cmath>
#include <random>

#include "mcads/init.hpp"

namespace mcads {

Tensor he_uniform_init(const Shape& shape, std::int64_t fan_in, std::uint64_t seed, DType dtype) {
  if (fan_in <= 0) throw ShapeError("he_uniform_init: fan_in must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull ^ (seed * 0x9E3779B97F4A7C15ull);
  for (unsigned char ch : name) h = (h ^ ch) * 1099511628211ull;
  // splitmix64 finalizer
  h += 0x9E3779B97F4A7C15ull;
  h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ull;
  h = (h ^ (h >> 27)) * 0x94D049BB133111EBull;
  return h ^ (h >> 31);
}

ParamStore::ParamStore(DType dtype, std::uint64_t seed, InitMode mode)
    : dtype_(dtype), seed_(seed), mode_(mode) {}

void ParamStore::claim(const std::string& name) {
  if (!names_.emplace(name, 0).second) throw ShapeError("duplicate parameter name '" + name + "'");
}

Parameter* ParamStore::add(const std::string& name, Shape shape, Init init) {
  claim(name);
  Tensor value;
  if (mode_ == InitMode::meta) {
    value = Tensor::meta(std::move(shape), dtype_);
  } else {
    switch (init.kind) {
      case Init::Kind::zeros: value = Tensor(std::move(shape), dtype_, 0.0); break;
      case Init::Kind::ones: value = Tensor(std::move(shape), dtype_, 1.0); break;
      case Init::Kind::he_uniform:
        value = he_uniform_init(shape, init.fan_in, derive_seed(seed_, name), dtype_);
        break;
    }
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->var = Var(std::move(value), true);
  params_.push_back(std::move(p));
  return params_.back().get();
}

Tensor* ParamStore::add_buffer(const std::string& name, Shape shape, double fill) {
  claim(name);
  auto t = std::make_unique<Tensor>(mode_ == InitMode::meta ? Tensor::meta(std::move(shape), dtype_)
                                                            : Tensor(std::move(shape), dtype_, fill));
  buffers_.emplace_back(name, std::move(t));
  return buffers_.back().second.get();
}

std::vector<Parameter*> ParamStore::parameters() const {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Tensor* ParamStore::find_buffer(const std::string& name) const {
  for (const auto& [n, t] : buffers_) {
    if (n == name) return t.get();
  }
  return nullptr;
}

std::int64_t ParamStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->numel();
  return n;
}

std::map<std::string, std::int64_t> ParamStore::count_by_prefix(int depth) const {
  std::map<std::string, std::int64_t> out;
  for (const auto& p : params_) {
    std::size_t end = 0;
    for (int i = 0; i < depth; ++i) {
      end = p->name.find('.', i == 0 ? 0 : end + 1);
      if (end == std::string::npos) break;
    }
    out[p->name.substr(0, end)] += p->numel();
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->var.node()->grad = Tensor();
}

}  // namespace mcads
