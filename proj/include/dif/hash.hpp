#pragma once

#include "dif/tensor.hpp"

#include <cstdint>
#include <string>

namespace dif {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h = kFnvOffset) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  return fnv1a(b, 8, h);
}

// Shape then payload bytes; floats hash as their little-endian storage.
template <class S>
std::uint64_t hash_tensor(const Tensor<S>& t, std::uint64_t h = kFnvOffset) {
  for (int d : t.shape) h = fnv1a_u64((std::uint64_t)d, h);
  return fnv1a(t.ptr(), sizeof(S) * (std::size_t)t.numel(), h);
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = digits[h & 0xf];
  return out;
}

}  // namespace dif
