#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "support/oracles.hpp"
#include "vms/image.hpp"
#include "vms/page_store.hpp"
#include "vms/sha256.hpp"

using namespace vms;
using namespace vms::test;

namespace {
std::filesystem::path temp_dir() {
  auto d = std::filesystem::temp_directory_path() / "vms_page_store_test";
  std::filesystem::create_directories(d);
  return d;
}
}  // namespace

TEST_CASE("sha256 matches published vectors on both code paths") {
  auto hex = [](const Sha256Digest& d) {
    std::string s;
    char b[3];
    for (auto x : d) {
      std::snprintf(b, 3, "%02x", x);
      s += b;
    }
    return s;
  };
  for (bool portable : {false, true}) {
    sha256_force_portable(portable);
    CHECK(hex(sha256(nullptr, 0)) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const char* abc = "abc";
    CHECK(hex(sha256(reinterpret_cast<const std::uint8_t*>(abc), 3)) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const char* two = "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq";
    CHECK(hex(sha256(reinterpret_cast<const std::uint8_t*>(two), 56)) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
  }
  sha256_force_portable(false);
}

TEST_CASE("hash_page: zero sentinel and determinism") {
  std::array<std::uint8_t, kPageSize> zeros{};
  CHECK(hash_page(zeros) == kZeroHash);
  CHECK(PageContent{}.hash() == kZeroHash);
  CHECK(PageContent::literal(zeros).hash() == kZeroHash);

  Rng rng(42);
  PageContent a = random_page(rng);
  auto bytes = a.bytes();
  CHECK(hash_page(bytes) == a.hash());
  CHECK(PageContent::literal(bytes).hash() == a.hash());
}

TEST_CASE("hash_page rejects wrong-length input") {
  std::vector<std::uint8_t> small(100, 1);
  CHECK_THROWS_AS((void)hash_page(small), VmsError);
  std::vector<std::uint8_t> big(kPageSize + 1, 1);
  CHECK_THROWS_AS((void)PageContent::literal(big), VmsError);
}

TEST_CASE("hash_page: 10^4 distinct pages give pairwise-distinct digests") {
  // Any digest collision is cross-checked with a full byte comparison.
  Rng rng(7);
  std::map<std::array<std::uint8_t, 32>, PageContent> seen;
  for (int i = 0; i < 10000; i++) {
    PageContent c = (i % 2) ? random_page(rng) : PageContent::pattern(rng.next());
    ContentHash h = c.hash();
    auto [it, inserted] = seen.emplace(h.digest, c);
    if (!inserted) {
      // Collision claimed: contents must actually be identical bytes.
      CHECK(it->second == c);
      FAIL("distinct contents collided on a 256-bit digest");
    }
  }
  CHECK(seen.size() == 10000);
}

TEST_CASE("put_page dedups, zero short-circuits, round trips exactly") {
  PageStore store;
  Rng rng(1);
  PageContent c = random_page(rng);

  ContentHash h1 = store.put(c);
  ContentHash h2 = store.put(c);
  CHECK(h1 == h2);
  CHECK(store.unique_pages() == 1);
  CHECK(store.refcount(h1) == 2);
  CHECK(store.logical_pages() == 2);

  ContentHash hz = store.put(PageContent{});
  CHECK(hz == kZeroHash);
  CHECK(store.unique_pages() == 1);
  CHECK(store.logical_pages() == 3);

  // 1000 random pages round trip bit-identically.
  std::vector<std::array<std::uint8_t, kPageSize>> originals;
  std::vector<ContentHash> hashes;
  for (int i = 0; i < 1000; i++) {
    PageContent p = random_page(rng);
    originals.push_back(p.bytes());
    hashes.push_back(store.put(p));
  }
  for (int i = 0; i < 1000; i++)
    CHECK(page_equals(originals[static_cast<std::size_t>(i)],
                      store.get(hashes[static_cast<std::size_t>(i)])));
}

TEST_CASE("get_page: zero hash, round trip, and lifecycle errors") {
  PageStore store;
  CHECK(store.get(kZeroHash).is_zero());

  Rng rng(2);
  PageContent c = random_page(rng);
  ContentHash h = store.put(c);
  CHECK(store.get(h) == c);

  store.release(h);
  CHECK_THROWS_AS((void)store.get(h), VmsError);
  CHECK_THROWS_AS(store.release(h), VmsError);
}

TEST_CASE("release_page refcount lifecycle") {
  PageStore store;
  Rng rng(3);
  PageContent c = random_page(rng);

  store.put(c);
  store.release(c.hash());
  CHECK(store.unique_pages() == 0);
  CHECK(store.logical_pages() == 0);

  store.put(c);
  store.put(c);
  store.release(c.hash());
  CHECK(store.unique_pages() == 1);
  CHECK(store.refcount(c.hash()) == 1);
}

TEST_CASE("interleaved put/release fuzz matches the multiset oracle") {
  PageStore store;
  MultisetCounter oracle;
  Rng rng(99);
  std::vector<PageContent> alphabet;
  for (int i = 0; i < 64; i++) alphabet.push_back(random_page(rng));
  alphabet.push_back(PageContent{});  // zero page in the mix
  std::vector<ContentHash> live;

  for (int op = 0; op < 10000; op++) {
    bool do_put = live.empty() || rng.u01() < 0.6;
    if (do_put) {
      const PageContent& c = alphabet[rng.below(alphabet.size())];
      ContentHash h = store.put(c);
      oracle.put(h);
      live.push_back(h);
    } else {
      std::size_t i = rng.below(live.size());
      ContentHash h = live[i];
      live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
      store.release(h);
      oracle.release(h);
    }
  }
  CHECK(store.unique_pages() == oracle.unique());
  CHECK(store.logical_pages() == oracle.logical());
  for (const auto& c : alphabet) {
    if (c.is_zero()) continue;
    CHECK(store.refcount(c.hash()) == oracle.count(c.hash()));
  }
}

TEST_CASE("dedup_stats") {
  PageStore store;
  auto s0 = store.stats();
  CHECK(s0.logical_pages == 0);
  CHECK(s0.unique_pages == 0);
  CHECK(s0.dedup_ratio == doctest::Approx(0.0));

  Rng rng(5);
  PageContent c = random_page(rng);
  for (int i = 0; i < 10; i++) store.put(c);
  auto s1 = store.stats();
  CHECK(s1.logical_pages == 10);
  CHECK(s1.unique_pages == 1);
  CHECK(s1.dedup_ratio == doctest::Approx(10.0));

  // Random mixture cross-checked against the multiset oracle.
  MultisetCounter oracle;
  for (int i = 0; i < 10; i++) oracle.put(c.hash());
  for (int i = 0; i < 500; i++) {
    PageContent p = (i % 3) ? random_page(rng) : c;
    oracle.put(store.put(p));
  }
  auto s2 = store.stats();
  CHECK(s2.logical_pages == oracle.logical());
  CHECK(s2.unique_pages == oracle.unique());
  CHECK(s2.dedup_ratio ==
        doctest::Approx(static_cast<double>(oracle.logical()) /
                        static_cast<double>(oracle.unique())));
}

namespace {
LiveImageManifest sample_manifest(PageStore& store, Rng& rng, std::uint64_t mem_pages,
                                  std::uint64_t nonzero, std::uint64_t disk_pages = 64) {
  LiveImageManifest m;
  m.image_id = "sample";
  m.identity = {"host-a", "net-a"};
  m.memory_page_count = mem_pages;
  m.disk_page_count = disk_pages;
  m.created_at_us = 12345;
  m.vcpu_state.resize(512);
  for (auto& b : m.vcpu_state) b = static_cast<std::uint8_t>(rng.next());
  for (std::uint64_t p = 0; p < nonzero; p++) {
    PageContent c = (p % 4 == 0 && p > 0) ? store.get(m.memory_map[0].second)
                                          : random_page(rng);
    ContentHash h = store.put(c);
    m.memory_map.emplace_back(p * 2, h);  // spread entries; gaps stay zero
  }
  return m;
}
}  // namespace

TEST_CASE("image file: empty manifest is magic + manifest section only") {
  PageStore store;
  LiveImageManifest m;
  m.image_id = "empty";
  m.identity = {"h", "n"};
  auto path = temp_dir() / "empty.vms";
  write_image(store, m, path);

  CHECK(image_pack_record_count(path) == 0);
  // magic(8) + len(8) + manifest body; no pack records.
  std::uint64_t body = (8 + 5)      // image_id "empty"
                       + (8 + 0)    // vcpu_state
                       + 8 + 8      // empty memory/disk maps
                       + (8 + 1)    // hostname "h"
                       + (8 + 1)    // net_id "n"
                       + 8 + 8 + 8; // page counts + created_at
  CHECK(std::filesystem::file_size(path) == 16 + body);

  PageStore store2;
  LiveImageManifest back = read_image(path, store2);
  CHECK(back == m);
}

TEST_CASE("image file: zero pages occupy no pack records") {
  // 1024-page memory, 512 of them zero: at most 512 content records.
  PageStore store;
  Rng rng(11);
  LiveImageManifest m;
  m.image_id = "halfzero";
  m.identity = {"h", "n"};
  m.memory_page_count = 1024;
  for (std::uint64_t p = 0; p < 512; p++)
    m.memory_map.emplace_back(p, store.put(random_page(rng)));
  auto path = temp_dir() / "halfzero.vms";
  write_image(store, m, path);
  CHECK(image_pack_record_count(path) <= 512);

  // Stored bytes are independent of how many zero pages the image spans.
  LiveImageManifest wide = m;
  wide.image_id = "halfzero";
  wide.memory_page_count = 1024 * 1024;
  auto path2 = temp_dir() / "widezero.vms";
  write_image(store, wide, path2);
  CHECK(std::filesystem::file_size(path2) == std::filesystem::file_size(path));
}

TEST_CASE("image file: arbitrary manifest round trip is deep-equal") {
  PageStore store;
  Rng rng(13);
  LiveImageManifest m = sample_manifest(store, rng, 4096, 300);
  auto path = temp_dir() / "roundtrip.vms";
  write_image(store, m, path);

  PageStore store2;
  LiveImageManifest back = read_image(path, store2);
  CHECK(back == m);
  for (const auto& [page, h] : m.memory_map) CHECK(store2.get(h) == store.get(h));
  // One reference per manifest map entry.
  MultisetCounter oracle;
  for (const auto& [page, h] : m.memory_map) oracle.put(h);
  for (const auto& [page, h] : m.memory_map)
    CHECK(store2.refcount(h) == oracle.count(h));
}

TEST_CASE("image file: corruption and missing-content failures") {
  PageStore store;
  Rng rng(17);
  LiveImageManifest m = sample_manifest(store, rng, 1024, 40);
  auto path = temp_dir() / "corrupt.vms";
  write_image(store, m, path);

  SUBCASE("bad magic") {
    auto bad = temp_dir() / "bad_magic.vms";
    std::filesystem::copy_file(path, bad, std::filesystem::copy_options::overwrite_existing);
    std::fstream f(bad, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXXXX", 8);
    f.close();
    PageStore s;
    CHECK_THROWS_WITH_AS((void)read_image(bad, s), doctest::Contains("bad magic"), VmsError);
  }

  SUBCASE("truncated pack section") {
    auto trunc = temp_dir() / "trunc.vms";
    auto size = std::filesystem::file_size(path);
    {
      std::ifstream in(path, std::ios::binary);
      std::vector<char> data(size - 100);
      in.read(data.data(), static_cast<std::streamsize>(data.size()));
      std::ofstream out(trunc, std::ios::binary);
      out.write(data.data(), static_cast<std::streamsize>(data.size()));
    }
    PageStore s;
    CHECK_THROWS_AS((void)read_image(trunc, s), VmsError);
  }

  SUBCASE("unresolvable hash on write") {
    PageStore empty;
    CHECK_THROWS_AS(write_image(empty, m, temp_dir() / "never.vms"), VmsError);
    // Failed writes leave no partial image behind.
    CHECK(!std::filesystem::exists(temp_dir() / "never.vms"));
  }
}

TEST_CASE("refcount conservation: store refs equal references held by clients") {
  // Clients: one manifest (one ref per map entry) plus an address space whose
  // shared pages each hold one ref through its hooks.
  PageStore store;
  Rng rng(23);
  LiveImageManifest m = sample_manifest(store, rng, 2048, 200, 0);

  StoreSpaceHooks hooks(store);
  AddressSpace space(2048, &hooks);
  space.set_source("img:sample");
  std::uint64_t space_refs = 0;
  for (const auto& [page, h] : m.memory_map) {
    if (page % 3 == 0) {
      space.mark_remote(page);
      PageContent c = store.get(h);
      space.make_shared(page, h, nullptr);  // ref through hooks
      space_refs++;
      (void)c;
    }
  }

  MultisetCounter oracle;
  for (const auto& [page, h] : m.memory_map) oracle.put(h);  // manifest refs
  for (PageNumber p = 0; p < space.page_count(); p++)
    if (space.state(p) == PageState::Shared) oracle.put(space.shared_hash(p));

  CHECK(store.logical_pages() == oracle.logical());
  std::uint64_t total_refs = 0;
  for (const auto& [h, c] : store.sorted_entries()) {
    CHECK(store.refcount(h) == oracle.count(h));
    total_refs += store.refcount(h);
  }
  CHECK(total_refs == m.memory_map.size() + space_refs);
}
