#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rise/core/nn.hpp"

namespace rise {

// Parameter checkpoint file:
//   magic "RISENET1" (8 bytes), u32 version,
//   then one record per tensor until EOF:
//     u32 name length, name bytes, u32 rank, u32 dims..., f32 payload.
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[8] = {'R', 'I', 'S', 'E', 'N', 'E', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is, std::uint64_t& offset, const char* what) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (is.gcount() != 4) throw FormatError(std::string("truncated while reading ") + what, offset);
  offset += 4;
  return v;
}

}  // namespace detail

template <class F>
void save_checkpoint(const ParamStore<F>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : store.entries()) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(d));
    if constexpr (std::is_same_v<F, float>) {
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
    } else {
      std::vector<float> tmp(t.raw().begin(), t.raw().end());
      os.write(reinterpret_cast<const char*>(tmp.data()),
               static_cast<std::streamsize>(tmp.size() * sizeof(float)));
    }
  }
  if (!os) throw UsageError("write failed for checkpoint: " + path);
}

// Loads into an already-constructed store: every record must name an existing
// parameter of identical shape, and every parameter must be covered.
template <class F>
void load_checkpoint(ParamStore<F>& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint: " + path);
  std::uint64_t offset = 0;
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8) throw FormatError("truncated magic", offset);
  offset += 8;
  if (std::memcmp(magic, "RISENET", 7) != 0) throw FormatError("bad magic", 0);
  if (magic[7] != '1')
    throw UnsupportedVersionError(std::string("checkpoint revision '") + magic[7] +
                                  "' (this build reads '1')");
  std::uint32_t version = detail::read_u32(is, offset, "version");
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version));

  std::size_t loaded = 0;
  while (true) {
    std::uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 4);
    if (is.gcount() == 0) break;  // clean EOF
    if (is.gcount() != 4) throw FormatError("truncated name length", offset);
    offset += 4;
    if (name_len > 4096) throw FormatError("implausible name length", offset - 4);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (is.gcount() != static_cast<std::streamsize>(name_len))
      throw FormatError("truncated name", offset);
    offset += name_len;
    std::uint32_t rank = detail::read_u32(is, offset, "rank");
    if (rank > 8) throw FormatError("implausible rank", offset - 4);
    std::vector<int> shape(rank);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(detail::read_u32(is, offset, "shape"));
      numel *= d;
    }
    std::vector<float> payload(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(numel * sizeof(float)))
      throw FormatError("truncated payload for '" + name + "'", offset);
    offset += static_cast<std::uint64_t>(numel) * sizeof(float);

    TensorT<F>* t = store.find(name);
    if (!t) throw UsageError("checkpoint names unknown parameter '" + name + "'");
    if (t->shape() != shape)
      throw UsageError("checkpoint shape mismatch for parameter '" + name + "'");
    auto& data = t->raw();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<F>(payload[i]);
    ++loaded;
  }
  if (loaded != store.size())
    throw UsageError("checkpoint covers " + std::to_string(loaded) + " of " +
                     std::to_string(store.size()) + " parameters");
}

}  // namespace rise
