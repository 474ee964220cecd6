#include "vms/page_store.hpp"

#include <algorithm>

namespace vms {

ContentHash PageStore::put(const PageContent& content) {
  ContentHash h = content.hash();
  std::lock_guard<std::mutex> lk(m_);
  logical_pages_++;
  if (h.is_zero()) return kZeroHash;
  auto [it, inserted] = entries_.try_emplace(h);
  if (inserted) {
    it->second.content = content;
    it->second.refcount = 1;
  } else {
    it->second.refcount++;
  }
  return h;
}

void PageStore::add_ref(const ContentHash& hash) {
  if (hash.is_zero()) {
    std::lock_guard<std::mutex> lk(m_);
    logical_pages_++;
    return;
  }
  std::lock_guard<std::mutex> lk(m_);
  auto it = entries_.find(hash);
  if (it == entries_.end())
    throw VmsError(Err::MissingPage, "add_ref on unknown hash " + hash.hex());
  it->second.refcount++;
  logical_pages_++;
}

PageContent PageStore::get(const ContentHash& hash) const {
  if (hash.is_zero()) return PageContent{};
  std::lock_guard<std::mutex> lk(m_);
  auto it = entries_.find(hash);
  if (it == entries_.end())
    throw VmsError(Err::MissingPage, "unknown hash " + hash.hex());
  return it->second.content;
}

void PageStore::release(const ContentHash& hash) {
  std::lock_guard<std::mutex> lk(m_);
  if (hash.is_zero()) {
    if (logical_pages_ > 0) logical_pages_--;
    return;
  }
  auto it = entries_.find(hash);
  if (it == entries_.end())
    throw VmsError(Err::MissingPage, "release of unknown hash " + hash.hex());
  if (--it->second.refcount == 0) entries_.erase(it);
  logical_pages_--;
}

bool PageStore::contains(const ContentHash& hash) const {
  if (hash.is_zero()) return true;
  std::lock_guard<std::mutex> lk(m_);
  return entries_.count(hash) != 0;
}

std::uint64_t PageStore::refcount(const ContentHash& hash) const {
  std::lock_guard<std::mutex> lk(m_);
  auto it = entries_.find(hash);
  return it == entries_.end() ? 0 : it->second.refcount;
}

std::uint64_t PageStore::unique_pages() const {
  std::lock_guard<std::mutex> lk(m_);
  return entries_.size();
}

std::uint64_t PageStore::logical_pages() const {
  std::lock_guard<std::mutex> lk(m_);
  return logical_pages_;
}

DedupStats PageStore::stats() const {
  std::lock_guard<std::mutex> lk(m_);
  DedupStats s;
  s.logical_pages = logical_pages_;
  s.unique_pages = entries_.size();
  s.dedup_ratio = logical_pages_ == 0
                      ? 0.0
                      : static_cast<double>(logical_pages_) /
                            static_cast<double>(std::max<std::uint64_t>(entries_.size(), 1));
  return s;
}

std::vector<std::pair<ContentHash, PageContent>> PageStore::sorted_entries() const {
  std::vector<std::pair<ContentHash, PageContent>> v;
  {
    std::lock_guard<std::mutex> lk(m_);
    v.reserve(entries_.size());
    for (const auto& [h, e] : entries_) v.emplace_back(h, e.content);
  }
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return v;
}

}  // namespace vms
