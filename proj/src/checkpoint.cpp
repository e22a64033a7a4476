#include "mcads/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace mcads {

namespace {

constexpr char kMagic[4] = {'M', 'C', 'T', '1'};

template <class U>
void put_le(std::ostream& os, U value) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const std::string& what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw DataError("checkpoint truncated reading " + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

void put_float(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_le(os, bits);
}

void put_double(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_le(os, bits);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (t.is_meta()) throw DataError("cannot checkpoint shape-only tensor '" + name + "'");
    if (name.size() > 0xFFFF) throw DataError("tensor name too long: " + name);
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
    if (t.dtype() == DType::f32) {
      for (float v : t.data<float>()) put_float(os, v);
    } else {
      for (double v : t.data<double>()) put_double(os, v);
    }
  }
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("'" + path.string() + "' is not an MCT1 checkpoint (bad magic)");
  }
  const auto count = get_le<std::uint32_t>(is, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("checkpoint truncated reading name");
    const auto rank = get_le<std::uint8_t>(is, "rank");
    Shape shape;
    for (int r = 0; r < rank; ++r) shape.push_back(get_le<std::uint32_t>(is, "extent"));
    const auto code = get_le<std::uint8_t>(is, "dtype");
    if (code > 1) throw DataError("unknown dtype code " + std::to_string(code) + " for tensor '" + name + "'");
    const auto dtype = static_cast<DType>(code);
    Tensor t(shape, dtype);
    if (dtype == DType::f32) {
      for (auto& v : t.data<float>()) {
        const auto bits = get_le<std::uint32_t>(is, "payload of " + name);
        std::memcpy(&v, &bits, sizeof v);
      }
    } else {
      for (auto& v : t.data<double>()) {
        const auto bits = get_le<std::uint64_t>(is, "payload of " + name);
        std::memcpy(&v, &bits, sizeof v);
      }
    }
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

std::vector<NamedTensor> collect_state(const ParamStore& store) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.params()) out.push_back({p->name, p->value()});
  for (const auto& [name, t] : store.buffers()) out.push_back({name, *t});
  return out;
}

void save_store(const std::filesystem::path& path, const ParamStore& store) {
  write_checkpoint(path, collect_state(store));
}

void load_state(const std::vector<NamedTensor>& tensors, ParamStore& store) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;

  std::ostringstream diff;
  auto check = [&](const std::string& name, const Tensor& target) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      diff << "  missing: " << name << ' ' << to_string(target.shape()) << '\n';
      return;
    }
    if (it->second->shape() != target.shape()) {
      diff << "  shape mismatch: " << name << " checkpoint " << to_string(it->second->shape()) << " vs model "
           << to_string(target.shape()) << '\n';
    }
  };
  for (const auto& p : store.params()) check(p->name, p->value());
  for (const auto& [name, t] : store.buffers()) check(name, *t);
  for (const auto& nt : tensors) {
    if (!store.find(nt.name) && !store.find_buffer(nt.name)) diff << "  unexpected: " << nt.name << '\n';
  }
  const std::string d = diff.str();
  if (!d.empty()) throw DataError("checkpoint does not match model configuration:\n" + d);

  for (const auto& p : store.params()) p->mutable_value() = by_name[p->name]->to(store.dtype());
  for (const auto& [name, t] : store.buffers()) *t = by_name[name]->to(store.dtype());
}

void load_store(const std::filesystem::path& path, ParamStore& store) {
  load_state(read_checkpoint(path), store);
}

}  // namespace mcads
