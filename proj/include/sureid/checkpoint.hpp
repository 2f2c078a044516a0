#pragma once

// Checkpoint container. Wire format (little-endian):
//   magic "SURD" (4 bytes), u32 version, u32 tensor count, then per tensor:
//   u32 name length, name bytes, u32 rank, u32 dims[rank], f32 payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sureid/errors.hpp"
#include "sureid/tensor.hpp"

namespace sureid {

struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  // Insertion order preserved so that save -> load -> save is stable.
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  void put(const std::string& name, const Tensor<float>& t) {
    for (auto& [n, v] : tensors)
      if (n == name) {
        v = t;
        return;
      }
    tensors.emplace_back(name, t);
  }

  bool has(const std::string& name) const {
    for (auto& [n, v] : tensors)
      if (n == name) return true;
    return false;
  }

  const Tensor<float>& get(const std::string& name) const {
    for (auto& [n, v] : tensors)
      if (n == name) return v;
    throw CheckpointError("checkpoint: missing tensor '" + name + "'");
  }
};

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw CheckpointError("checkpoint: unexpected end of file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path);
  out.write("SURD", 4);
  detail::write_u32(out, Checkpoint::kVersion);
  detail::write_u32(out, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t i = 0; i < t.rank(); ++i) detail::write_u32(out, static_cast<uint32_t>(t.dim(i)));
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * 4));
  }
  if (!out) throw CheckpointError("checkpoint: write failure on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "SURD", 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path + " (expected 'SURD', found '" +
                          std::string(magic, magic + std::max<std::streamsize>(in.gcount(), 0)) +
                          "')");
  const uint32_t version = detail::read_u32(in);
  if (version != Checkpoint::kVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(Checkpoint::kVersion) + ")");
  const uint32_t count = detail::read_u32(in);
  Checkpoint ck;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      throw CheckpointError("checkpoint: unexpected end of file");
    const uint32_t rank = detail::read_u32(in);
    Shape shape;
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int64_t>(detail::read_u32(in)));
      numel *= shape.back();
    }
    auto t = Tensor<float>::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(numel * 4));
    if (in.gcount() != static_cast<std::streamsize>(numel * 4))
      throw CheckpointError("checkpoint: truncated tensor '" + name + "' in " + path);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace sureid
