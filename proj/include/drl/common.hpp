#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace drl {

// Error taxonomy. The CLI maps these onto distinct exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct CorruptFileError : Error {
  using Error::Error;
};

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Parameters and dataset images are kept on the fp32 grid; math runs in
// 64-bit and results are snapped back to storage precision.
inline double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void snap_to_storage(std::vector<double>& v) {
  for (double& x : v) x = to_storage(x);
}

// FNV-1a, used for content hashes and substream derivation.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t hash_u64(std::uint64_t x, std::uint64_t h = 0xcbf29ce484222325ULL) {
  unsigned char b[8];
  std::memcpy(b, &x, 8);
  return fnv1a(b, 8, h);
}

inline std::uint64_t hash_double(double x, std::uint64_t h = 0xcbf29ce484222325ULL) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  return hash_u64(bits, h);
}

}  // namespace drl
