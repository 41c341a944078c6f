#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "safedig/f16.hpp"
#include "safedig/tensor.hpp"

namespace safedig {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr char kContainerMagic[4] = {'S', 'D', 'G', 'A'};
inline constexpr std::uint32_t kContainerVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Container file: magic "SDGA" | version u32 LE | header length u32 LE |
// UTF-8 JSON header | raw little-endian payload, row-major.
struct Container {
  json header;
  std::vector<std::uint8_t> payload;
};

namespace detail {

inline void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xffu));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xffu));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xffu));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xffu));
}

inline std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> container_to_bytes(const Container& c) {
  std::string header = c.header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(12 + header.size() + c.payload.size());
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  detail::put_u32_le(out, kContainerVersion);
  detail::put_u32_le(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), c.payload.begin(), c.payload.end());
  return out;
}

inline Container container_from_bytes(const std::vector<std::uint8_t>& bytes,
                                      const std::string& origin) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw IoError(origin + ": bad container magic");
  }
  std::uint32_t version = detail::get_u32_le(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw IoError(origin + ": unsupported container version " + std::to_string(version) +
                  " (expected " + std::to_string(kContainerVersion) + ")");
  }
  std::uint32_t header_len = detail::get_u32_le(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) {
    throw IoError(origin + ": truncated container header");
  }
  Container c;
  std::string header(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  c.header = json::parse(header, nullptr, false);
  if (c.header.is_discarded()) throw IoError(origin + ": container header is not valid JSON");
  c.payload.assign(bytes.begin() + 12 + header_len, bytes.end());
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

// Durable write: temp file in the same directory, flushed, then renamed over
// the destination. A crash before the rename leaves no partial destination.
inline void write_file_atomic(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw IoError("write failed for " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline std::string read_text(const fs::path& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_container(const fs::path& path, const Container& c) {
  write_file_atomic(path, container_to_bytes(c));
}

inline Container read_container(const fs::path& path) {
  return container_from_bytes(read_file_bytes(path), path.string());
}

inline std::vector<std::uint8_t> f32_payload(const Tensor& t) {
  std::vector<std::uint8_t> out(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    float v = t[i];
    std::memcpy(&bits, &v, 4);
    out[i * 4 + 0] = static_cast<std::uint8_t>(bits & 0xffu);
    out[i * 4 + 1] = static_cast<std::uint8_t>((bits >> 8) & 0xffu);
    out[i * 4 + 2] = static_cast<std::uint8_t>((bits >> 16) & 0xffu);
    out[i * 4 + 3] = static_cast<std::uint8_t>((bits >> 24) & 0xffu);
  }
  return out;
}

inline Tensor tensor_from_f32_payload(const std::vector<std::uint8_t>& bytes,
                                      std::vector<std::size_t> shape,
                                      const std::string& origin) {
  if (bytes.size() != Tensor::count(shape) * 4) {
    throw IoError(origin + ": f32 payload length mismatch");
  }
  std::vector<float> data(bytes.size() / 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits = static_cast<std::uint32_t>(bytes[i * 4]) |
                         (static_cast<std::uint32_t>(bytes[i * 4 + 1]) << 8) |
                         (static_cast<std::uint32_t>(bytes[i * 4 + 2]) << 16) |
                         (static_cast<std::uint32_t>(bytes[i * 4 + 3]) << 24);
    std::memcpy(&data[i], &bits, 4);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline std::vector<std::size_t> shape_from_json(const json& j) {
  std::vector<std::size_t> shape;
  for (const auto& v : j) shape.push_back(v.get<std::size_t>());
  return shape;
}

}  // namespace safedig
