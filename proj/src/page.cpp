#include "vms/page.hpp"

#include <mutex>
#include <unordered_map>

#include "vms/sha256.hpp"

namespace vms {

namespace {

bool all_zero(const std::uint8_t* p, std::size_t n) {
  // memcmp against the static zero page is far faster than a byte loop.
  return std::memcmp(p, zero_page_bytes().data(), n) == 0;
}

void fill_pattern(std::uint64_t gen_id, std::uint8_t* out) {
  std::uint64_t x = splitmix64(gen_id ^ 0xa5a5a5a55a5a5a5aULL);
  for (std::size_t i = 0; i < kPageSize / 8; i++) {
    x = splitmix64(x);
    std::uint64_t w = (i == 0) ? (x | 1) : x;  // never all-zero
    std::memcpy(out + 8 * i, &w, 8);
  }
}

// Pattern pages are identified by gen_id, so their digests are shared
// process-wide instead of being recomputed per copy.
class PatternHashCache {
 public:
  bool lookup(std::uint64_t id, ContentHash& out) {
    std::lock_guard<std::mutex> lk(m_);
    auto it = map_.find(id);
    if (it == map_.end()) return false;
    out = it->second;
    return true;
  }
  void store(std::uint64_t id, const ContentHash& h) {
    std::lock_guard<std::mutex> lk(m_);
    map_.emplace(id, h);
  }

 private:
  std::mutex m_;
  std::unordered_map<std::uint64_t, ContentHash> map_;
};

PatternHashCache& pattern_hashes() {
  static PatternHashCache c;
  return c;
}

}  // namespace

const std::array<std::uint8_t, kPageSize>& zero_page_bytes() {
  static const std::array<std::uint8_t, kPageSize> z{};
  return z;
}

std::string ContentHash::hex() const {
  static const char* d = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : digest) {
    s.push_back(d[b >> 4]);
    s.push_back(d[b & 0xf]);
  }
  return s;
}

PageContent PageContent::literal(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kPageSize)
    throw VmsError(Err::InvalidPage, "page must be exactly 4096 bytes, got " +
                                         std::to_string(bytes.size()));
  if (all_zero(bytes.data(), bytes.size())) return PageContent{};
  PageContent c;
  c.kind_ = Kind::Literal;
  c.buf_ = std::make_shared<Buf>();
  std::memcpy(c.buf_->bytes.data(), bytes.data(), kPageSize);
  return c;
}

PageContent PageContent::pattern(std::uint64_t gen_id) {
  PageContent c;
  c.kind_ = Kind::Pattern;
  c.gen_id_ = gen_id;
  return c;
}

void PageContent::copy_to(std::uint8_t* out) const {
  switch (kind_) {
    case Kind::Zero:
      std::memcpy(out, zero_page_bytes().data(), kPageSize);
      break;
    case Kind::Literal:
      std::memcpy(out, buf_->bytes.data(), kPageSize);
      break;
    case Kind::Pattern:
      fill_pattern(gen_id_, out);
      break;
  }
}

ContentHash PageContent::hash() const {
  switch (kind_) {
    case Kind::Zero:
      return kZeroHash;
    case Kind::Literal: {
      int st = buf_->hash_state.load(std::memory_order_acquire);
      if (st == 2) return buf_->hash;
      ContentHash h;
      h.digest = sha256(buf_->bytes.data(), kPageSize);
      int expect = 0;
      if (buf_->hash_state.compare_exchange_strong(expect, 1, std::memory_order_acq_rel)) {
        buf_->hash = h;
        buf_->hash_state.store(2, std::memory_order_release);
      }
      return h;
    }
    case Kind::Pattern: {
      ContentHash h;
      if (pattern_hashes().lookup(gen_id_, h)) return h;
      std::array<std::uint8_t, kPageSize> tmp;
      fill_pattern(gen_id_, tmp.data());
      h.digest = sha256(tmp.data(), kPageSize);
      pattern_hashes().store(gen_id_, h);
      return h;
    }
  }
  return kZeroHash;
}

bool PageContent::operator==(const PageContent& other) const {
  if (kind_ == Kind::Zero || other.kind_ == Kind::Zero) {
    if (kind_ == other.kind_) return true;
    const PageContent& nz = kind_ == Kind::Zero ? other : *this;
    auto b = nz.bytes();
    return all_zero(b.data(), b.size());
  }
  if (kind_ == Kind::Pattern && other.kind_ == Kind::Pattern)
    return gen_id_ == other.gen_id_;
  if (kind_ == Kind::Literal && other.kind_ == Kind::Literal && buf_ == other.buf_)
    return true;
  auto a = bytes();
  auto b = other.bytes();
  return std::memcmp(a.data(), b.data(), kPageSize) == 0;
}

ContentHash hash_page(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kPageSize)
    throw VmsError(Err::InvalidPage, "page must be exactly 4096 bytes, got " +
                                         std::to_string(bytes.size()));
  if (all_zero(bytes.data(), bytes.size())) return kZeroHash;
  ContentHash h;
  h.digest = sha256(bytes.data(), bytes.size());
  return h;
}

const char* err_name(Err e) {
  switch (e) {
    case Err::InvalidPage: return "InvalidPage";
    case Err::MissingPage: return "MissingPage";
    case Err::CorruptImage: return "CorruptImage";
    case Err::InvalidConfig: return "InvalidConfig";
    case Err::StoreError: return "StoreError";
    case Err::StreamUnavailable: return "StreamUnavailable";
    case Err::UnknownHost: return "UnknownHost";
    case Err::UnknownVm: return "UnknownVm";
    case Err::ProtocolError: return "ProtocolError";
    case Err::PlacementError: return "PlacementError";
    case Err::MigrationAborted: return "MigrationAborted";
    case Err::OvercommitFailure: return "OvercommitFailure";
  }
  return "UnknownError";
}

}  // namespace vms
