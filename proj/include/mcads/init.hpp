#pragma once

#include <cstdint>

#include "mcads/tensor.hpp"

namespace mcads {

// He-uniform: i.i.d. U(-sqrt(6/fan_in), +sqrt(6/fan_in)), deterministic in
// the seed.
Tensor he_uniform_init(const Shape& shape, std::int64_t fan_in, std::uint64_t seed,
                       DType dtype = DType::f32);

}  // namespace mcads
