#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace skiplight::detail {

// Byte-level little-endian encoding, independent of host order.

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float value) {
  std::uint32_t raw;
  std::memcpy(&raw, &value, 4);
  put_le(out, raw);
}

inline void put_f64(std::vector<std::uint8_t>& out, double value) {
  std::uint64_t raw;
  std::memcpy(&raw, &value, 8);
  put_le(out, raw);
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return value;
}

inline float get_f32(const std::uint8_t* p) {
  const auto raw = get_le<std::uint32_t>(p);
  float value;
  std::memcpy(&value, &raw, 4);
  return value;
}

inline double get_f64(const std::uint8_t* p) {
  const auto raw = get_le<std::uint64_t>(p);
  double value;
  std::memcpy(&value, &raw, 8);
  return value;
}

}  // namespace skiplight::detail
