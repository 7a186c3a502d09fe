#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace stx {

using Mat = Eigen::MatrixXd;
using Col = Eigen::VectorXd;
using Row = Eigen::RowVectorXd;

// Error categories surfaced by the CLI as machine-parsable codes.
enum class ErrorCategory { Config, Data, Gate, Numeric, Io };

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return "CONFIG";
    case ErrorCategory::Data: return "DATA";
    case ErrorCategory::Gate: return "GATE";
    case ErrorCategory::Numeric: return "NUMERIC";
    case ErrorCategory::Io: return "IO";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), category(cat) {}
  ErrorCategory category;
};

[[noreturn]] inline void fail(ErrorCategory cat, const std::string& msg) {
  throw Error(cat, msg);
}

inline void check(bool cond, ErrorCategory cat, const std::string& msg) {
  if (!cond) fail(cat, msg);
}

// Internal invariant check; violations are bugs, not user errors.
inline void require(bool cond, const char* what) {
  if (!cond) throw std::logic_error(std::string("internal invariant violated: ") + what);
}

// FNV-1a 64-bit, used for config/corpus/log hashing.
inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a_bytes(s.data(), s.size(), h);
}

uint32_t crc32(const void* data, size_t n, uint32_t seed = 0);

inline bool all_finite(const Mat& m) { return m.allFinite(); }

std::string hex64(uint64_t v);

}  // namespace stx
