#pragma once

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "rcm/tensor.hpp"

namespace rcm {

/// Named-tensor container, little-endian:
///   magic "RCMC" | version u32 | entry count u32 |
///   per entry: name len u16, name bytes, dtype u8 (0=f32, 1=f64),
///              ndim u8, dims u32 each, raw values |
///   crc32 u32 of all preceding bytes.
/// Self-describing: a reader needs no model code to enumerate tensors.
namespace ckpt {

inline constexpr uint32_t kVersion = 1;
inline constexpr char kMagic[4] = {'R', 'C', 'M', 'C'};

using AnyTensor = std::variant<Tensor, TensorD>;

namespace detail {

inline void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
template <class T>
void put_raw(std::string& buf, const T* data, size_t count) {
  size_t off = buf.size();
  buf.resize(off + count * sizeof(T));
  std::memcpy(buf.data() + off, data, count * sizeof(T));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > buf.size()) throw Error("checkpoint: truncated file");
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint8_t>(buf[pos]) | (static_cast<uint8_t>(buf[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

/// Serializes entries in the given (already ordered) sequence.
inline std::string serialize(const std::vector<std::pair<std::string, AnyTensor>>& entries) {
  std::string buf;
  buf.append(kMagic, 4);
  detail::put_u32(buf, kVersion);
  detail::put_u32(buf, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (name.size() > 0xffff) throw Error("checkpoint: entry name too long");
    detail::put_u16(buf, static_cast<uint16_t>(name.size()));
    buf.append(name);
    std::visit(
        [&buf](const auto& t) {
          using S = typename std::decay_t<decltype(t)>::value_type;
          buf.push_back(static_cast<char>(std::is_same_v<S, float> ? 0 : 1));
          buf.push_back(static_cast<char>(t.shape.size()));
          for (int d : t.shape) detail::put_u32(buf, static_cast<uint32_t>(d));
          detail::put_raw(buf, t.data.data(), t.data.size());
        },
        tensor);
  }
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  detail::put_u32(buf, crc);
  return buf;
}

inline std::vector<std::pair<std::string, AnyTensor>> deserialize(const std::string& buf) {
  if (buf.size() < 16) throw Error("checkpoint: truncated file");
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(static_cast<uint8_t>(buf[buf.size() - 4 + i])) << (8 * i);
  uint32_t actual = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (stored != actual) throw Error("checkpoint: CRC mismatch");

  detail::Reader r{buf};
  if (r.bytes(4) != std::string(kMagic, 4)) throw Error("checkpoint: bad magic");
  uint32_t version = r.u32();
  if (version != kVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = r.u32();
  std::vector<std::pair<std::string, AnyTensor>> out;
  out.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    std::string name = r.bytes(r.u16());
    uint8_t dtype = r.u8();
    uint8_t ndim = r.u8();
    std::vector<int> shape(ndim);
    int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(r.u32());
      numel *= d;
    }
    if (dtype == 0) {
      Tensor t;
      t.shape = shape;
      std::string raw = r.bytes(static_cast<size_t>(numel) * sizeof(float));
      t.data.resize(static_cast<size_t>(numel));
      std::memcpy(t.data.data(), raw.data(), raw.size());
      out.emplace_back(name, std::move(t));
    } else if (dtype == 1) {
      TensorD t;
      t.shape = shape;
      std::string raw = r.bytes(static_cast<size_t>(numel) * sizeof(double));
      t.data.resize(static_cast<size_t>(numel));
      std::memcpy(t.data.data(), raw.data(), raw.size());
      out.emplace_back(name, std::move(t));
    } else {
      throw Error("checkpoint: unknown dtype code " + std::to_string(dtype));
    }
  }
  if (r.pos != buf.size() - 4) throw Error("checkpoint: trailing bytes");
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("cannot open for write: " + path);
  size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw Error("short write: " + path);
}

inline std::string read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw Error("cannot open: " + path);
  std::string buf;
  char chunk[65536];
  size_t n;
  while ((n = std::fread(chunk, 1, sizeof chunk, f)) > 0) buf.append(chunk, n);
  std::fclose(f);
  return buf;
}

inline void save(const std::string& path,
                 const std::vector<std::pair<std::string, AnyTensor>>& entries) {
  write_file(path, serialize(entries));
}

inline std::vector<std::pair<std::string, AnyTensor>> load(const std::string& path) {
  return deserialize(read_file(path));
}

}  // namespace ckpt
}  // namespace rcm
