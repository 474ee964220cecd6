#include "vms/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace vms {

namespace {

constexpr char kMagic[8] = {'V', 'M', 'S', 'I', 'M', 'G', '0', '1'};

void append_page_map(std::vector<std::uint8_t>& out, const PageMap& map) {
  put_u64(out, map.size());
  for (const auto& [page, hash] : map) {
    put_u64(out, page);
    put_bytes(out, hash.digest);
  }
}

std::vector<std::uint8_t> encode_manifest(const LiveImageManifest& m) {
  std::vector<std::uint8_t> body;
  put_str(body, m.image_id);
  put_u64(body, m.vcpu_state.size());
  put_bytes(body, m.vcpu_state);
  append_page_map(body, m.memory_map);
  append_page_map(body, m.disk_map);
  put_str(body, m.identity.hostname);
  put_str(body, m.identity.net_id);
  put_u64(body, m.memory_page_count);
  put_u64(body, m.disk_page_count);
  put_u64(body, m.created_at_us);
  return body;
}

LiveImageManifest decode_manifest(std::span<const std::uint8_t> body) {
  LiveImageManifest m;
  try {
    ByteReader r(body);
    m.image_id = r.str();
    std::uint64_t vlen = r.u64();
    auto vb = r.bytes(static_cast<std::size_t>(vlen));
    m.vcpu_state.assign(vb.begin(), vb.end());
    // Page counts live after the maps, so parse maps leniently first and
    // re-check ranges afterwards.
    PageMap mem, disk;
    {
      std::uint64_t n = r.u64();
      mem.reserve(static_cast<std::size_t>(n));
      for (std::uint64_t i = 0; i < n; i++) {
        PageNumber page = r.u64();
        ContentHash h;
        auto b = r.bytes(32);
        std::copy(b.begin(), b.end(), h.digest.begin());
        mem.emplace_back(page, h);
      }
      n = r.u64();
      disk.reserve(static_cast<std::size_t>(n));
      for (std::uint64_t i = 0; i < n; i++) {
        PageNumber page = r.u64();
        ContentHash h;
        auto b = r.bytes(32);
        std::copy(b.begin(), b.end(), h.digest.begin());
        disk.emplace_back(page, h);
      }
    }
    m.identity.hostname = r.str();
    m.identity.net_id = r.str();
    m.memory_page_count = r.u64();
    m.disk_page_count = r.u64();
    m.created_at_us = r.u64();
    if (r.remaining() != 0)
      throw VmsError(Err::CorruptImage, "trailing bytes in manifest section");

    auto check = [](const PageMap& map, std::uint64_t count, const char* what) {
      PageNumber prev = 0;
      for (std::size_t i = 0; i < map.size(); i++) {
        if (i > 0 && map[i].first <= prev)
          throw VmsError(Err::CorruptImage, std::string(what) + " map not sorted");
        if (map[i].first >= count)
          throw VmsError(Err::CorruptImage, std::string(what) + " map entry out of range");
        if (map[i].second.is_zero())
          throw VmsError(Err::CorruptImage, std::string(what) + " map holds explicit zero hash");
        prev = map[i].first;
      }
    };
    check(mem, m.memory_page_count, "memory");
    check(disk, m.disk_page_count, "disk");
    m.memory_map = std::move(mem);
    m.disk_map = std::move(disk);
  } catch (const VmsError& e) {
    if (e.code() == Err::ProtocolError)
      throw VmsError(Err::CorruptImage, "truncated manifest section");
    throw;
  }
  return m;
}

std::vector<std::uint8_t> read_file_prefix(std::ifstream& in, std::size_t n, const char* what) {
  std::vector<std::uint8_t> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw VmsError(Err::CorruptImage, std::string("truncated ") + what);
  return buf;
}

}  // namespace

std::optional<ContentHash> lookup_page_map(const PageMap& map, PageNumber page) {
  auto it = std::lower_bound(map.begin(), map.end(), page,
                             [](const auto& e, PageNumber p) { return e.first < p; });
  if (it == map.end() || it->first != page) return std::nullopt;
  return it->second;
}

std::optional<ContentHash> LiveImageManifest::memory_hash(PageNumber page) const {
  if (page >= memory_page_count) return std::nullopt;
  auto h = lookup_page_map(memory_map, page);
  return h ? *h : kZeroHash;
}

void write_image(const PageStore& store, const LiveImageManifest& manifest,
                 const std::filesystem::path& path) {
  // Unique non-zero hashes, sorted by digest, one pack record each.
  std::set<ContentHash> hashes;
  for (const auto& [page, h] : manifest.memory_map) hashes.insert(h);
  for (const auto& [page, h] : manifest.disk_map) hashes.insert(h);

  std::vector<std::uint8_t> head;
  head.insert(head.end(), kMagic, kMagic + 8);
  auto body = encode_manifest(manifest);
  put_u64(head, body.size());
  put_bytes(head, body);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw VmsError(Err::StoreError, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(head.data()),
              static_cast<std::streamsize>(head.size()));
    std::array<std::uint8_t, kPageSize> page_buf;
    for (const auto& h : hashes) {
      PageContent c = store.get(h);  // MissingPage if unresolvable
      std::vector<std::uint8_t> rec;
      rec.reserve(32 + 4);
      put_bytes(rec, h.digest);
      put_u32(rec, kPageSize);
      out.write(reinterpret_cast<const char*>(rec.data()),
                static_cast<std::streamsize>(rec.size()));
      c.copy_to(page_buf.data());
      out.write(reinterpret_cast<const char*>(page_buf.data()), kPageSize);
    }
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw VmsError(Err::StoreError, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw VmsError(Err::StoreError, "rename failed: " + ec.message());
  }
}

namespace {

LiveImageManifest read_image_impl(const std::filesystem::path& path, PageStore* store,
                                  std::uint64_t* pack_records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VmsError(Err::CorruptImage, "cannot open " + path.string());

  auto magic = read_file_prefix(in, 8, "magic");
  if (std::memcmp(magic.data(), kMagic, 8) != 0)
    throw VmsError(Err::CorruptImage, "bad magic in " + path.string());

  auto len_bytes = read_file_prefix(in, 8, "manifest length");
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; i++) mlen |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
  if (mlen > (1ULL << 40))
    throw VmsError(Err::CorruptImage, "implausible manifest length");
  auto body = read_file_prefix(in, static_cast<std::size_t>(mlen), "manifest section");
  LiveImageManifest m = decode_manifest(body);

  // Pack section: sorted unique records to EOF.
  std::map<ContentHash, PageContent> pack;
  ContentHash prev{};
  bool first = true;
  std::uint64_t count = 0;
  for (;;) {
    std::uint8_t rec_head[36];
    in.read(reinterpret_cast<char*>(rec_head), 36);
    if (in.gcount() == 0 && in.eof()) break;
    if (in.gcount() != 36) throw VmsError(Err::CorruptImage, "truncated pack record header");
    ContentHash h;
    std::memcpy(h.digest.data(), rec_head, 32);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; i++) len |= static_cast<std::uint32_t>(rec_head[32 + i]) << (8 * i);
    if (len != kPageSize) throw VmsError(Err::CorruptImage, "pack record with bad length");
    if (h.is_zero()) throw VmsError(Err::CorruptImage, "pack record for zero page");
    if (!first && !(prev < h))
      throw VmsError(Err::CorruptImage, "pack records not sorted/unique");
    std::array<std::uint8_t, kPageSize> buf;
    in.read(reinterpret_cast<char*>(buf.data()), kPageSize);
    if (in.gcount() != kPageSize) throw VmsError(Err::CorruptImage, "truncated pack record body");
    PageContent c = PageContent::literal(buf);
    if (c.hash() != h)
      throw VmsError(Err::CorruptImage, "pack record digest mismatch");
    pack.emplace(h, std::move(c));
    prev = h;
    first = false;
    count++;
  }
  if (pack_records) *pack_records = count;

  if (store) {
    auto load_map = [&](const PageMap& map) {
      for (const auto& [page, h] : map) {
        auto it = pack.find(h);
        if (it == pack.end()) {
          if (store->contains(h) && !h.is_zero()) {
            store->add_ref(h);
            continue;
          }
          throw VmsError(Err::MissingPage,
                         "manifest hash " + h.hex() + " has no pack record");
        }
        store->put(it->second);
      }
    };
    load_map(m.memory_map);
    load_map(m.disk_map);
  }
  return m;
}

}  // namespace

LiveImageManifest read_image(const std::filesystem::path& path, PageStore& store) {
  return read_image_impl(path, &store, nullptr);
}

LiveImageManifest read_image_manifest(const std::filesystem::path& path) {
  return read_image_impl(path, nullptr, nullptr);
}

std::uint64_t image_pack_record_count(const std::filesystem::path& path) {
  std::uint64_t n = 0;
  read_image_impl(path, nullptr, &n);
  return n;
}

}  // namespace vms
