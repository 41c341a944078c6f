#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "safedig/tensor.hpp"

namespace safedig {

// IEEE binary16 <-> binary32 conversion. Encoding uses round-to-nearest-even;
// decoding is exact. Overflow saturates to +-inf, which the caller's tensor
// finiteness check then rejects.
inline std::uint16_t f32_to_f16(float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, sizeof(x));
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;

  if (abs > 0x7f800000u) return static_cast<std::uint16_t>(sign | 0x7e00u);  // NaN
  if (abs >= 0x7f800000u) return static_cast<std::uint16_t>(sign | 0x7c00u); // inf

  std::int32_t exp = static_cast<std::int32_t>(abs >> 23) - 127;
  std::uint32_t mant = abs & 0x7fffffu;

  if (exp > 15) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow -> inf
  if (exp >= -14) {
    // Normal range: 10-bit mantissa with round-to-nearest-even on the cut bits.
    std::uint32_t m = mant;
    std::uint32_t round_bit = (m >> 12) & 1u;
    std::uint32_t sticky = (m & 0xfffu) != 0;
    std::uint32_t h = (static_cast<std::uint32_t>(exp + 15) << 10) | (m >> 13);
    if (round_bit && (sticky || (h & 1u))) ++h;  // may carry into exponent; 65520 -> inf
    return static_cast<std::uint16_t>(sign | h);
  }
  if (exp >= -25) {
    // Subnormal range: materialize the implicit leading 1, then shift the
    // significand down to units of 2^-24 with round-to-nearest-even.
    std::uint32_t m = mant | 0x800000u;
    std::uint32_t shift = static_cast<std::uint32_t>(-exp - 1);  // 14..24
    std::uint32_t kept = m >> shift;
    std::uint32_t round_bit = (m >> (shift - 1)) & 1u;
    std::uint32_t sticky = (m & ((1u << (shift - 1)) - 1u)) != 0;
    if (round_bit && (sticky || (kept & 1u))) ++kept;
    return static_cast<std::uint16_t>(sign | kept);
  }
  return sign;  // underflow to signed zero
}

inline float f16_to_f32(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  std::uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      // Subnormal: renormalize.
      std::uint32_t m = mant;
      std::int32_t e = -1;
      while ((m & 0x400u) == 0) {
        m <<= 1;
        --e;
      }
      m &= 0x3ffu;
      out = sign | (static_cast<std::uint32_t>(e + 127 - 14) << 23) | (m << 13);
    }
  } else if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13);
  } else {
    out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &out, sizeof(f));
  return f;
}

// Storage view of a tensor in binary16, little-endian 16-bit words.
struct Half16Buffer {
  std::vector<std::uint16_t> payload;
  std::vector<std::size_t> original_shape;

  static Half16Buffer encode(const Tensor& x) {
    Half16Buffer b;
    b.original_shape = x.shape();
    b.payload.reserve(x.size());
    for (float v : x.data()) b.payload.push_back(f32_to_f16(v));
    return b;
  }

  Tensor decode() const {
    std::vector<float> data;
    data.reserve(payload.size());
    for (std::uint16_t h : payload) data.push_back(f16_to_f32(h));
    // Tensor construction rejects inf produced by binary16 overflow.
    return Tensor(original_shape, std::move(data));
  }

  std::vector<std::uint8_t> to_bytes() const {
    std::vector<std::uint8_t> out;
    out.reserve(payload.size() * 2);
    for (std::uint16_t h : payload) {
      out.push_back(static_cast<std::uint8_t>(h & 0xffu));
      out.push_back(static_cast<std::uint8_t>(h >> 8));
    }
    return out;
  }

  static Half16Buffer from_bytes(const std::vector<std::uint8_t>& bytes,
                                 std::vector<std::size_t> shape) {
    if (bytes.size() % 2 != 0) throw IoError("binary16 payload has odd byte length");
    Half16Buffer b;
    b.original_shape = std::move(shape);
    b.payload.reserve(bytes.size() / 2);
    for (std::size_t i = 0; i < bytes.size(); i += 2) {
      b.payload.push_back(static_cast<std::uint16_t>(bytes[i] | (bytes[i + 1] << 8)));
    }
    return b;
  }
};

// Stored-precision view: encode to binary16 and decode back. Throws
// PrecisionError when a value overflows binary16 (max finite 65504).
inline Tensor f16_roundtrip(const Tensor& x) {
  try {
    return Half16Buffer::encode(x).decode();
  } catch (const PrecisionError&) {
    throw PrecisionError("value exceeds binary16 finite range");
  }
}

}  // namespace safedig
