// Per-host resident memory: one content-addressed pool holding every page
// frame on the host that is not private to a VM. Entries referenced by VM
// pages are the host's shared frames (charged once however many VMs map
// them); entries with no references are the read cache, LRU-bounded by
// capacity_bytes. Private pages live in the owning AddressSpace and are never
// tracked here.
#ifndef VMS_HOST_HPP
#define VMS_HOST_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vms/page.hpp"

namespace vms {

struct HostSpec {
  std::string host_id;
  std::uint64_t ram_bytes = 16ULL << 30;
  std::uint64_t nic_bits_per_s = 10'000'000'000ULL;
  double cache_fraction = 0.10;
  std::uint32_t cores = 8;

  std::uint64_t cache_capacity_bytes() const {
    return static_cast<std::uint64_t>(static_cast<double>(ram_bytes) * cache_fraction);
  }
  bool operator==(const HostSpec&) const = default;
};

struct PageRef {
  std::uint32_t vm_slot = 0;
  PageNumber page = 0;
  bool operator==(const PageRef&) const = default;
};

class HostMemory {
 public:
  explicit HostMemory(std::uint64_t cache_capacity_bytes)
      : cache_capacity_(cache_capacity_bytes) {}

  bool contains(const ContentHash& hash) const;

  // Adds one VM reference. content supplies the bytes when the pool does not
  // hold them yet; returns false if the bytes are needed but absent (the
  // caller re-faults). Touches LRU.
  bool install_ref(const ContentHash& hash, const PageContent* content, PageRef ref);

  // Drops one VM reference. When the last reference goes, the frame either
  // stays behind as a cache entry (read caching) or is freed.
  void remove_ref(const ContentHash& hash, PageRef ref, bool retain_in_cache = true);

  // Resolves content and touches LRU. Throws MissingPage.
  PageContent get(const ContentHash& hash);
  PageContent peek(const ContentHash& hash) const;  // no LRU touch

  // Oldest entry by LRU, shared or cached alike. Used by watermark
  // enforcement; the caller flips the returned page refs to Remote.
  struct Victim {
    ContentHash hash;
    std::vector<PageRef> refs;
    std::uint64_t freed_bytes = 0;
  };
  std::optional<Victim> evict_oldest();

  std::uint64_t shared_unique_bytes() const { return ref_unique_bytes_; }
  std::uint64_t cache_bytes() const { return cache_bytes_; }
  std::uint64_t entry_count() const { return entries_.size(); }
  std::uint64_t vm_ref_count(const ContentHash& hash) const;
  std::uint64_t total_vm_refs() const;

  std::vector<ContentHash> sorted_hashes() const;

 private:
  struct Entry {
    PageContent content;
    std::vector<PageRef> refs;
    std::uint64_t stamp = 0;
  };

  void touch(Entry& e, const ContentHash& h);
  void trim_cache();

  std::unordered_map<ContentHash, Entry, ContentHashHasher> entries_;
  std::map<std::uint64_t, ContentHash> lru_;  // stamp -> hash
  std::uint64_t next_stamp_ = 1;
  std::uint64_t cache_capacity_ = 0;
  std::uint64_t ref_unique_bytes_ = 0;
  std::uint64_t cache_bytes_ = 0;
};

}  // namespace vms

#endif
