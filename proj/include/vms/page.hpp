// Page values and content hashing.
//
// A PageContent is an immutable 4 KiB page. Three representations share one
// value semantics: the all-zero page (no allocation), a literal buffer, and a
// procedurally generated pattern page (stored as an 8-byte generator id and
// materialized on demand, which keeps multi-GiB scenarios inside a desk-scale
// process). Equality and hashing are always over the materialized bytes.
#ifndef VMS_PAGE_HPP
#define VMS_PAGE_HPP

#include <array>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>

#include "vms/common.hpp"

namespace vms {

using PageNumber = std::uint64_t;

struct ContentHash {
  std::array<std::uint8_t, 32> digest{};

  bool is_zero() const {
    for (auto b : digest)
      if (b) return false;
    return true;
  }
  bool operator==(const ContentHash&) const = default;
  bool operator<(const ContentHash& o) const { return digest < o.digest; }
  std::string hex() const;
};

// Sentinel for the all-zero page. Zero pages never consume storage.
inline const ContentHash kZeroHash{};

struct ContentHashHasher {
  std::size_t operator()(const ContentHash& h) const {
    std::uint64_t v;
    std::memcpy(&v, h.digest.data(), 8);
    return static_cast<std::size_t>(v);
  }
};

class PageContent {
 public:
  PageContent() = default;  // zero page

  // Throws InvalidPage unless exactly kPageSize bytes.
  static PageContent literal(std::span<const std::uint8_t> bytes);
  // Deterministic non-zero page derived from a 64-bit generator id.
  static PageContent pattern(std::uint64_t gen_id);

  bool is_zero() const { return kind_ == Kind::Zero; }
  // Writes the full page into out (out must have kPageSize bytes).
  void copy_to(std::uint8_t* out) const;
  std::array<std::uint8_t, kPageSize> bytes() const {
    std::array<std::uint8_t, kPageSize> a;
    copy_to(a.data());
    return a;
  }

  // Content digest; memoized per buffer / generator id. Zero content maps to
  // the kZeroHash sentinel rather than the real SHA-256 of a zero page.
  ContentHash hash() const;

  bool operator==(const PageContent& other) const;

 private:
  enum class Kind : std::uint8_t { Zero, Literal, Pattern };

  struct Buf {
    std::array<std::uint8_t, kPageSize> bytes;
    std::atomic<int> hash_state{0};  // 0 none, 1 busy, 2 done
    ContentHash hash;
  };

  Kind kind_ = Kind::Zero;
  std::uint64_t gen_id_ = 0;
  std::shared_ptr<Buf> buf_;
};

// Digest of a raw page buffer; InvalidPage unless exactly kPageSize bytes.
ContentHash hash_page(std::span<const std::uint8_t> bytes);
inline ContentHash hash_page(const PageContent& c) { return c.hash(); }

const std::array<std::uint8_t, kPageSize>& zero_page_bytes();

}  // namespace vms

#endif
