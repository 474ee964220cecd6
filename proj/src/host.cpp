#include "vms/host.hpp"

#include <algorithm>

namespace vms {

bool HostMemory::contains(const ContentHash& hash) const {
  return entries_.count(hash) != 0;
}

void HostMemory::touch(Entry& e, const ContentHash& h) {
  lru_.erase(e.stamp);
  e.stamp = next_stamp_++;
  lru_.emplace(e.stamp, h);
}

bool HostMemory::install_ref(const ContentHash& hash, const PageContent* content,
                             PageRef ref) {
  if (hash.is_zero())
    throw VmsError(Err::InvalidPage, "zero pages are not pool-resident");
  auto it = entries_.find(hash);
  if (it == entries_.end()) {
    if (!content) return false;
    Entry e;
    e.content = *content;
    e.stamp = next_stamp_++;
    it = entries_.emplace(hash, std::move(e)).first;
    lru_.emplace(it->second.stamp, hash);
    it->second.refs.push_back(ref);
    ref_unique_bytes_ += kPageSize;
    return true;
  }
  if (it->second.refs.empty()) {
    // Promoted out of the cache.
    cache_bytes_ -= kPageSize;
    ref_unique_bytes_ += kPageSize;
  }
  it->second.refs.push_back(ref);
  touch(it->second, hash);
  return true;
}

void HostMemory::remove_ref(const ContentHash& hash, PageRef ref, bool retain_in_cache) {
  auto it = entries_.find(hash);
  if (it == entries_.end())
    throw VmsError(Err::MissingPage, "remove_ref on absent frame " + hash.hex());
  auto& refs = it->second.refs;
  auto rit = std::find(refs.begin(), refs.end(), ref);
  if (rit == refs.end())
    throw VmsError(Err::MissingPage, "remove_ref with unknown reference");
  refs.erase(rit);
  if (!refs.empty()) return;
  ref_unique_bytes_ -= kPageSize;
  if (retain_in_cache) {
    cache_bytes_ += kPageSize;
    trim_cache();
  } else {
    lru_.erase(it->second.stamp);
    entries_.erase(it);
  }
}

PageContent HostMemory::get(const ContentHash& hash) {
  if (hash.is_zero()) return PageContent{};
  auto it = entries_.find(hash);
  if (it == entries_.end())
    throw VmsError(Err::MissingPage, "frame not resident: " + hash.hex());
  touch(it->second, hash);
  return it->second.content;
}

PageContent HostMemory::peek(const ContentHash& hash) const {
  if (hash.is_zero()) return PageContent{};
  auto it = entries_.find(hash);
  if (it == entries_.end())
    throw VmsError(Err::MissingPage, "frame not resident: " + hash.hex());
  return it->second.content;
}

std::optional<HostMemory::Victim> HostMemory::evict_oldest() {
  if (lru_.empty()) return std::nullopt;
  auto oldest = lru_.begin();
  auto it = entries_.find(oldest->second);
  Victim v;
  v.hash = oldest->second;
  v.refs = it->second.refs;
  v.freed_bytes = kPageSize;
  if (it->second.refs.empty())
    cache_bytes_ -= kPageSize;
  else
    ref_unique_bytes_ -= kPageSize;
  lru_.erase(oldest);
  entries_.erase(it);
  return v;
}

void HostMemory::trim_cache() {
  // Drops the oldest unreferenced frames until the cache fits.
  while (cache_bytes_ > cache_capacity_) {
    auto lit = lru_.begin();
    bool dropped = false;
    for (; lit != lru_.end(); ++lit) {
      auto it = entries_.find(lit->second);
      if (it->second.refs.empty()) {
        cache_bytes_ -= kPageSize;
        entries_.erase(it);
        lru_.erase(lit);
        dropped = true;
        break;
      }
    }
    if (!dropped) break;
  }
}

std::uint64_t HostMemory::vm_ref_count(const ContentHash& hash) const {
  auto it = entries_.find(hash);
  return it == entries_.end() ? 0 : it->second.refs.size();
}

std::uint64_t HostMemory::total_vm_refs() const {
  std::uint64_t n = 0;
  for (const auto& [h, e] : entries_) n += e.refs.size();
  return n;
}

std::vector<ContentHash> HostMemory::sorted_hashes() const {
  std::vector<ContentHash> v;
  v.reserve(entries_.size());
  for (const auto& [h, e] : entries_) v.push_back(h);
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace vms
