// Content-addressed, reference-counted page repository. One instance backs
// the shared image store; per-host resident memory reuses the same container
// through HostMemory.
#ifndef VMS_PAGE_STORE_HPP
#define VMS_PAGE_STORE_HPP

#include <cstdint>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "vms/page.hpp"

namespace vms {

struct DedupStats {
  std::uint64_t logical_pages = 0;
  std::uint64_t unique_pages = 0;
  double dedup_ratio = 0.0;
};

class PageStore {
 public:
  PageStore() = default;
  PageStore(const PageStore&) = delete;
  PageStore& operator=(const PageStore&) = delete;

  // Stores (or dedups) one page and takes one reference. Zero content
  // short-circuits to kZeroHash and consumes no storage.
  ContentHash put(const PageContent& content);

  // Takes an additional reference on an existing entry. No-op for kZeroHash.
  void add_ref(const ContentHash& hash);

  // kZeroHash resolves to the zero page; unknown hashes throw MissingPage.
  PageContent get(const ContentHash& hash) const;

  // Drops one reference; the entry is removed when the count reaches zero.
  // kZeroHash is a no-op. Unknown hashes throw MissingPage.
  void release(const ContentHash& hash);

  bool contains(const ContentHash& hash) const;
  std::uint64_t refcount(const ContentHash& hash) const;  // 0 when absent

  std::uint64_t unique_pages() const;
  std::uint64_t logical_pages() const;
  DedupStats stats() const;

  // Entries sorted by digest (image pack sections, audits).
  std::vector<std::pair<ContentHash, PageContent>> sorted_entries() const;

 private:
  struct Entry {
    PageContent content;
    std::uint64_t refcount = 0;
  };
  mutable std::mutex m_;  // writers serialized; cheap enough for readers too
  std::unordered_map<ContentHash, Entry, ContentHashHasher> entries_;
  std::uint64_t logical_pages_ = 0;
};

}  // namespace vms

#endif
