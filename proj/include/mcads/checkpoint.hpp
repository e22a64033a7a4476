#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mcads/parameter.hpp"
#include "mcads/tensor.hpp"

// .mct checkpoint files, little-endian:
//   "MCT1" | u32 count | count x { u16 name_len | name (UTF-8) | u8 rank |
//   rank x u32 extent | u8 dtype (0 = f32, 1 = f64) | row-major payload }
namespace mcads {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Parameters followed by buffers, in registration order.
std::vector<NamedTensor> collect_state(const ParamStore& store);
void save_store(const std::filesystem::path& path, const ParamStore& store);

// Copies every named tensor into the store, converting dtype when needed.
// Throws DataError listing missing, unexpected and mis-shaped names when the
// checkpoint does not match the store exactly.
void load_store(const std::filesystem::path& path, ParamStore& store);
void load_state(const std::vector<NamedTensor>& tensors, ParamStore& store);

}  // namespace mcads
