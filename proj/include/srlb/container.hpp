#pragma once

// Binary tensor container shared by checkpoints and mask files.
//
//   "SRLB" | u32 version | u64 header_len | header (UTF-8 JSON) | pad | tensors
//
// The header holds free-form `meta` plus a `tensors` table of
// {name, dtype, shape, offset, nbytes}. Offsets are absolute and 64-byte
// aligned; payloads are little-endian in table order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "srlb/errors.hpp"
#include "srlb/tensor.hpp"

namespace srlb {

static_assert(std::is_same_v<real, float>, "containers store f32; build with the default SRLB_REAL");
static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[4] = {'S', 'R', 'L', 'B'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlign = 64;

struct ContainerEntry {
  std::string name;
  std::string dtype;  // "f32" or "u8"
  Shape shape;
  std::vector<unsigned char> bytes;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ContainerEntry> entries;

  const ContainerEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "u8") return 1;
  throw HeaderMismatchError("container: unknown dtype '" + dtype + "'");
}

inline ContainerEntry make_f32_entry(std::string name, const Tensor& t) {
  ContainerEntry e{std::move(name), "f32", t.shape(), std::vector<unsigned char>(t.numel() * 4)};
  if (t.numel()) std::memcpy(e.bytes.data(), t.ptr(), e.bytes.size());
  return e;
}

inline Tensor entry_to_tensor(const ContainerEntry& e) {
  if (e.dtype != "f32") throw HeaderMismatchError("container: tensor '" + e.name + "' is not f32");
  Tensor t(e.shape);
  std::memcpy(t.ptr(), e.bytes.data(), e.bytes.size());
  return t;
}

inline std::size_t align_up(std::size_t v) { return (v + kContainerAlign - 1) / kContainerAlign * kContainerAlign; }

inline std::vector<unsigned char> encode_container(const Container& c) {
  // Offsets depend on header length, which depends on offsets; iterate to a fixed point.
  nlohmann::json table;
  std::string header;
  std::size_t data_start = 0;
  for (int pass = 0; pass < 8; ++pass) {
    table = nlohmann::json::array();
    std::size_t off = data_start;
    for (const auto& e : c.entries) {
      off = align_up(off);
      table.push_back({{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", off},
                       {"nbytes", e.bytes.size()}});
      off += e.bytes.size();
    }
    header = nlohmann::json{{"meta", c.meta}, {"tensors", table}}.dump();
    std::size_t need = align_up(16 + header.size());
    if (need == data_start) break;
    data_start = need;
  }

  std::vector<unsigned char> out(data_start, 0);
  std::memcpy(out.data(), kContainerMagic, 4);
  std::uint32_t ver = kContainerVersion;
  std::memcpy(out.data() + 4, &ver, 4);
  std::uint64_t hlen = header.size();
  std::memcpy(out.data() + 8, &hlen, 8);
  std::memcpy(out.data() + 16, header.data(), header.size());
  for (std::size_t i = 0; i < c.entries.size(); ++i) {
    std::size_t off = table[i]["offset"].get<std::size_t>();
    out.resize(off, 0);
    out.insert(out.end(), c.entries[i].bytes.begin(), c.entries[i].bytes.end());
  }
  return out;
}

inline Container decode_container(const std::vector<unsigned char>& buf) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kContainerMagic, 4) != 0) {
    throw BadMagicError("container: bad magic");
  }
  if (buf.size() < 16) throw TruncatedError("container: truncated preamble");
  std::uint32_t ver = 0;
  std::memcpy(&ver, buf.data() + 4, 4);
  if (ver != kContainerVersion) {
    throw VersionMismatchError("container: version " + std::to_string(ver) + ", expected " +
                               std::to_string(kContainerVersion));
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, buf.data() + 8, 8);
  if (hlen > buf.size() - 16) throw TruncatedError("container: header extends past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw HeaderMismatchError(std::string("container: malformed header: ") + e.what());
  }

  Container c;
  try {
    c.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      ContainerEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      const auto off = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("nbytes").get<std::size_t>();
      if (nbytes != shape_numel(e.shape) * dtype_size(e.dtype)) {
        throw HeaderMismatchError("container: tensor '" + e.name + "' byte count disagrees with shape " +
                                  shape_str(e.shape));
      }
      if (off % kContainerAlign != 0 || off < 16 + hlen) {
        throw HeaderMismatchError("container: tensor '" + e.name + "' has an invalid offset");
      }
      if (off > buf.size() || nbytes > buf.size() - off) {
        throw TruncatedError("container: tensor '" + e.name + "' is missing from the body");
      }
      e.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(off),
                     buf.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
      c.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw HeaderMismatchError(std::string("container: header is missing fields: ") + e.what());
  }
  return c;
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void save_container(const std::string& path, const Container& c) { write_file_bytes(path, encode_container(c)); }
inline Container load_container(const std::string& path) { return decode_container(read_file_bytes(path)); }

}  // namespace srlb
