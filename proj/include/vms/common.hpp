// Shared primitives: error codes, deterministic RNG, little-endian byte IO.
#ifndef VMS_COMMON_HPP
#define VMS_COMMON_HPP

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vms {

inline constexpr std::size_t kPageSize = 4096;

using TimeUs = std::uint64_t;

inline TimeUs us_from_s(double seconds) {
  return static_cast<TimeUs>(seconds * 1e6 + 0.5);
}

enum class Err {
  InvalidPage,
  MissingPage,
  CorruptImage,
  InvalidConfig,
  StoreError,
  StreamUnavailable,
  UnknownHost,
  UnknownVm,
  ProtocolError,
  PlacementError,
  MigrationAborted,
  OvercommitFailure,
};

const char* err_name(Err e);

class VmsError : public std::runtime_error {
 public:
  VmsError(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }
  const char* code_name() const { return err_name(code_); }

 private:
  Err code_;
};

// SplitMix64: the stateless mixer every deterministic draw in the project is
// built from. Standard-library distributions are implementation-defined, so
// all sampling goes through these helpers.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t hash_str64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a, folded through splitmix
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

// Uniform double in [0, 1) from 53 random bits.
inline double u01_from_bits(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Unbiased-enough bounded draw (fixed-point multiply; bias < 2^-64 * n).
inline std::uint64_t bounded(std::uint64_t bits, std::uint64_t n) {
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(bits) * n) >> 64);
}

// Sequential RNG stream for places that want stateful draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}
  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }
  std::uint64_t below(std::uint64_t n) { return bounded(next(), n); }
  double u01() { return u01_from_bits(next()); }

 private:
  std::uint64_t state_;
};

// --- little-endian byte IO -------------------------------------------------

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; i++) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; i++) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_bytes(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> b) {
  out.insert(out.end(), b.begin(), b.end());
}

inline void put_str(std::vector<std::uint8_t>& out, std::string_view s) {
  put_u64(out, s.size());
  out.insert(out.end(), s.begin(), s.end());
}

// Cursor over an input buffer; all getters throw ProtocolError on underrun
// (callers translate to CorruptImage where the source is a file).
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t pos() const { return pos_; }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; i++) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; i++) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() {
    std::uint64_t n = u64();
    if (n > remaining()) throw VmsError(Err::ProtocolError, "string length exceeds buffer");
    auto s = bytes(static_cast<std::size_t>(n));
    return std::string(reinterpret_cast<const char*>(s.data()), s.size());
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw VmsError(Err::ProtocolError, "truncated buffer");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace vms

#endif
