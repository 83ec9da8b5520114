#pragma once

// CPNF checkpoint container. Layout, all integers little-endian:
//   magic "CPNF" | u32 version | u32 record_count
//   per record: u32 name_len | name bytes | u32 rank | u64 dims[rank]
//               | f64 payload[prod(dims)]
// Round-trips bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cpnerf/autodiff.hpp"
#include "cpnerf/common.hpp"

namespace cpnerf {

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "save_checkpoint: cannot open " + path);
  os.write("CPNF", 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) detail::write_u64(os, static_cast<uint64_t>(d));
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * 8));
  }
  check(os.good(), "save_checkpoint: write failed for " + path);
}

inline NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  check(is.good() && std::memcmp(magic, "CPNF", 4) == 0,
        "load_checkpoint: bad magic in " + path);
  uint32_t version = detail::read_u32(is);
  check(version == kCheckpointVersion,
        "load_checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = detail::read_u32(is);
  NamedTensors out;
  out.reserve(count);
  for (uint32_t r = 0; r < count; ++r) {
    uint32_t name_len = detail::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = detail::read_u32(is);
    std::vector<int> shape(rank);
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(detail::read_u64(is));
      n *= shape[d];
    }
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()), n * 8);
    check(is.good(), "load_checkpoint: truncated file " + path);
    out.emplace_back(name, ad::Tensor::from_data(shape, std::move(data)));
  }
  return out;
}

// Copies checkpoint values into an existing parameter store by name.
inline void load_into(const std::string& path, nn::ParamStore& params) {
  NamedTensors loaded = load_checkpoint(path);
  for (auto& [name, t] : params.items()) {
    bool found = false;
    for (const auto& [lname, lt] : loaded) {
      if (lname != name) continue;
      check(lt.shape() == t.shape(), "load_into: shape mismatch for " + name + ": " +
                                         shape_str(lt.shape()) + " vs " +
                                         shape_str(t.shape()));
      t.data() = lt.data();
      found = true;
      break;
    }
    check(found, "load_into: checkpoint " + path + " missing tensor " + name);
  }
}

}  // namespace cpnerf
