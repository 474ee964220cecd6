// Live-image manifest and its on-disk format.
//
// File layout: magic "VMSIMG01" | u64 manifest length | manifest body |
// pack section. Manifest fields are serialized in declaration order with
// 8-byte little-endian integers, length-prefixed UTF-8 strings, and maps
// sorted by page number. The pack section is a run of records
// [32-byte digest][u32 length == 4096][content bytes], sorted by digest,
// each unique digest appearing once. Zero pages never produce pack records;
// pages absent from a map are zero.
#ifndef VMS_IMAGE_HPP
#define VMS_IMAGE_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vms/page_store.hpp"

namespace vms {

struct IdentityRecord {
  std::string hostname;
  std::string net_id;
  bool operator==(const IdentityRecord&) const = default;
};

using PageMap = std::vector<std::pair<PageNumber, ContentHash>>;  // sorted, non-zero hashes only

struct LiveImageManifest {
  std::string image_id;
  std::vector<std::uint8_t> vcpu_state;
  PageMap memory_map;
  PageMap disk_map;
  IdentityRecord identity;
  std::uint64_t memory_page_count = 0;
  std::uint64_t disk_page_count = 0;
  TimeUs created_at_us = 0;

  // kZeroHash for unmapped in-range pages; nullopt past the end.
  std::optional<ContentHash> memory_hash(PageNumber page) const;

  bool operator==(const LiveImageManifest&) const = default;
};

std::optional<ContentHash> lookup_page_map(const PageMap& map, PageNumber page);

// Serializes manifest + referenced contents. All non-zero hashes must resolve
// in `store` (MissingPage otherwise). Writes to a temporary path and renames,
// so a failed write never leaves a partial image behind.
void write_image(const PageStore& store, const LiveImageManifest& manifest,
                 const std::filesystem::path& path);

// Parses and validates an image file, loading pack contents into `store`
// (one reference per manifest map entry). Malformed input throws
// CorruptImage; a manifest hash with no pack record throws MissingPage.
LiveImageManifest read_image(const std::filesystem::path& path, PageStore& store);

// Manifest-only variant used for listings; does not touch any store.
LiveImageManifest read_image_manifest(const std::filesystem::path& path);

std::uint64_t image_pack_record_count(const std::filesystem::path& path);

}  // namespace vms

#endif
