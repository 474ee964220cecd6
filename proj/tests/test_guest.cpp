#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <map>

#include "doctest.h"
#include "support/oracles.hpp"
#include "vms/guest.hpp"

using namespace vms;
using namespace vms::test;

namespace {

WorkloadSpec seq_spec(double ops = 10.0, double wf = 0.0, std::uint64_t seed = 1) {
  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Sequential;
  w.ops_per_second = ops;
  w.write_fraction = wf;
  w.seed = seed;
  return w;
}

}  // namespace

TEST_CASE("create_vm: fresh 1 GiB guest is fully zero and thin") {
  GuestVm vm = create_vm("demo", 262144, seq_spec(), {"demo", "net-demo"});
  CHECK(vm.space.page_count() == 262144);
  CHECK(vm.space.zero_pages() == 262144);
  CHECK(vm.space.resident_bytes() == 0);
  CHECK(vm.vcpu_state.size() == kDefaultVcpuBytes);
}

TEST_CASE("create_vm: vcpu state is deterministic per vm id") {
  GuestVm a = create_vm("twin", 64, seq_spec(), {"twin", "n"});
  GuestVm b = create_vm("twin", 64, seq_spec(), {"twin", "n"});
  CHECK(a.vcpu_state == b.vcpu_state);
  GuestVm c = create_vm("other", 64, seq_spec(), {"other", "n"});
  CHECK(a.vcpu_state != c.vcpu_state);
}

TEST_CASE("create_vm: degenerate inputs") {
  CHECK_THROWS_AS((void)create_vm("x", 0, seq_spec(), {"x", "n"}), VmsError);
  CHECK_THROWS_AS((void)create_vm("x", 64, seq_spec(), {"", "n"}), VmsError);
}

TEST_CASE("generate_trace: size, determinism, sequential order") {
  GuestVm vm = create_vm("t", 10, seq_spec(1.0, 0.0), {"t", "n"});
  AccessTrace tr = generate_trace(vm, 10.0);
  REQUIRE(tr.size() == 10);
  for (std::size_t i = 0; i < 10; i++) {
    CHECK(tr[i].page == i);
    CHECK(!tr[i].is_write);
  }
  AccessTrace tr2 = generate_trace(vm, 10.0);
  REQUIRE(tr2.size() == tr.size());
  for (std::size_t i = 0; i < tr.size(); i++) {
    CHECK(tr[i].page == tr2[i].page);
    CHECK(tr[i].at_us == tr2[i].at_us);
    CHECK(tr[i].is_write == tr2[i].is_write);
  }
  // Timestamps non-decreasing.
  for (std::size_t i = 1; i < tr.size(); i++) CHECK(tr[i].at_us >= tr[i - 1].at_us);

  CHECK_THROWS_AS((void)generate_trace(vm, -1.0), VmsError);
}

TEST_CASE("generate_trace: write_fraction 0 yields no writes for any kind") {
  for (auto kind : {WorkloadSpec::Kind::Sequential, WorkloadSpec::Kind::Uniform,
                    WorkloadSpec::Kind::Hotspot}) {
    WorkloadSpec w = seq_spec(100.0, 0.0, 9);
    w.kind = kind;
    w.zipf_s = 1.2;
    GuestVm vm = create_vm("r", 256, w, {"r", "n"});
    for (const auto& a : generate_trace(vm, 10.0)) CHECK(!a.is_write);
  }
}

TEST_CASE("generate_trace: write_fraction statistics and content determinism") {
  WorkloadSpec w = seq_spec(1000.0, 0.3, 4);
  GuestVm vm = create_vm("w", 128, w, {"w", "n"});
  AccessTrace tr = generate_trace(vm, 10.0);
  std::uint64_t writes = 0;
  for (const auto& a : tr)
    if (a.is_write) {
      writes++;
      CHECK(!a.content.is_zero());
    }
  double frac = static_cast<double>(writes) / static_cast<double>(tr.size());
  CHECK(frac == doctest::Approx(0.3).epsilon(0.05));
}

TEST_CASE("hotspot: rank frequencies match closed-form Zipf weights") {
  const std::uint64_t pages = 1024;
  const std::uint64_t ops = 100000;
  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Hotspot;
  w.zipf_s = 1.0;
  w.ops_per_second = 1000.0;
  w.seed = 123;
  GuestVm vm = create_vm("z", pages, w, {"z", "n"});
  AccessTrace tr = generate_trace(vm, static_cast<double>(ops) / 1000.0);
  REQUIRE(tr.size() == ops);

  std::vector<std::uint64_t> hits(pages, 0);
  for (const auto& a : tr) hits[a.page]++;
  auto weights = zipf_weights(pages, 1.0);
  for (std::uint64_t rank = 1; rank <= 10; rank++) {
    double expected = weights[rank - 1] * static_cast<double>(ops);
    double actual = static_cast<double>(hits[rank - 1]);
    CHECK(actual == doctest::Approx(expected).epsilon(0.05));
  }
}

TEST_CASE("phased workload confines accesses to the active working set") {
  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Phased;
  w.ops_per_second = 100.0;
  w.seed = 5;
  w.phases = {{0, 15, 1.0}, {100, 131, 2.0}};
  GuestVm vm = create_vm("p", 256, w, {"p", "n"});
  AccessTrace tr = generate_trace(vm, 6.0);  // two full cycles
  REQUIRE(tr.size() == 600);
  for (const auto& a : tr) {
    double t_s = static_cast<double>(a.at_us) / 1e6;
    double pos = std::fmod(t_s, 3.0);
    bool first_phase = pos < 1.0;  // cycle restarts at the first phase
    if (first_phase)
      CHECK(a.page <= 15);
    else
      CHECK((a.page >= 100 && a.page <= 131));
  }
}

TEST_CASE("phased validation") {
  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Phased;
  w.ops_per_second = 1.0;
  CHECK_THROWS_AS((void)create_vm("p", 16, w, {"p", "n"}), VmsError);  // no phases
  w.phases = {{0, 32, 1.0}};
  CHECK_THROWS_AS((void)create_vm("p", 16, w, {"p", "n"}), VmsError);  // out of range
}

TEST_CASE("apply_trace: zero reads do not fault; writes privatize") {
  PageStore store;
  StoreSpaceHooks hooks(store);
  AddressSpace space(16, &hooks);

  bool faulted = false;
  FaultHandler fault = [&](PageNumber) { faulted = true; };

  ApplyReport rep;
  PageContent r = read_page(space, 3, fault, &rep);
  CHECK(r.is_zero());
  CHECK(!faulted);
  CHECK(space.state(3) == PageState::Zero);

  Rng rng(8);
  PageContent c = random_page(rng);
  write_page(space, 3, c, fault, &rep);
  CHECK(space.state(3) == PageState::Private);
  CHECK(read_page(space, 3, fault, &rep) == c);
  CHECK(rep.reads == 2);
  CHECK(rep.writes == 1);
  CHECK(rep.faults == 0);
}

namespace {

// A store-backed demand source standing in for the image server: faults
// install Shared pages from a manifest map.
struct FakeStream {
  PageStore& store;
  std::map<PageNumber, ContentHash>& map;
  AddressSpace& space;
  std::uint64_t served = 0;

  void operator()(PageNumber page) {
    auto it = map.find(page);
    REQUIRE(it != map.end());
    if (it->second.is_zero()) {
      space.clear_to_zero(page);
    } else {
      space.make_shared(page, it->second, nullptr);
    }
    served++;
  }
};

}  // namespace

TEST_CASE("apply_trace over a clone space equals the full-copy oracle") {
  const std::uint64_t pages = 128;
  PageStore store;
  Rng rng(21);

  // Fabricate image content and its flat-copy twin.
  std::map<PageNumber, ContentHash> image;
  FlatMemory oracle(pages);
  for (PageNumber p = 0; p < pages; p++) {
    if (p % 3 == 0) continue;  // zero page
    PageContent c = random_page(rng);
    image[p] = store.put(c);
    oracle.write(p, c);
  }

  StoreSpaceHooks hooks(store);
  AddressSpace space(pages, &hooks);
  space.set_source("img:test");
  for (const auto& [p, h] : image)
    if (!h.is_zero()) space.mark_remote(p);

  // Random mixed trace, applied to both the streaming space and the oracle.
  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Uniform;
  w.ops_per_second = 1000.0;
  w.write_fraction = 0.4;
  w.seed = 1234;
  GuestVm vm = create_vm("c", pages, w, {"c", "n"});
  AccessTrace tr = generate_trace(vm, 2.0);

  FakeStream stream{store, image, space};
  ApplyReport rep = apply_trace(space, tr, std::ref(stream));
  oracle.apply(tr);

  CHECK(rep.reads + rep.writes == tr.size());
  CHECK(rep.faults == stream.served);
  for (PageNumber p = 0; p < pages; p++) {
    FaultHandler f = std::ref(stream);
    PageContent got = read_page(space, p, f);
    CHECK(page_equals(oracle.page(p), got));
  }
}

TEST_CASE("state machine: workload-driven transitions never re-enter remote") {
  const std::uint64_t pages = 64;
  PageStore store;
  Rng rng(31);
  std::map<PageNumber, ContentHash> image;
  for (PageNumber p = 0; p < pages; p += 2) image[p] = store.put(random_page(rng));

  StoreSpaceHooks hooks(store);
  AddressSpace space(pages, &hooks);
  space.set_source("img:t");
  for (const auto& [p, h] : image) space.mark_remote(p);

  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Uniform;
  w.ops_per_second = 1000.0;
  w.write_fraction = 0.5;
  w.seed = 77;
  GuestVm vm = create_vm("sm", pages, w, {"sm", "n"});
  AccessTrace tr = generate_trace(vm, 1.0);

  FakeStream stream{store, image, space};
  auto snapshot = [&]() {
    std::vector<PageState> v(pages);
    for (PageNumber p = 0; p < pages; p++) v[p] = space.state(p);
    return v;
  };
  for (const auto& a : tr) {
    auto before = snapshot();
    AccessTrace one{a};
    apply_trace(space, one, std::ref(stream));
    auto after = snapshot();
    for (PageNumber p = 0; p < pages; p++) {
      if (before[p] == after[p]) continue;
      bool legal = (before[p] == PageState::Zero && after[p] == PageState::Private) ||
                   (before[p] == PageState::Remote && after[p] == PageState::Shared) ||
                   (before[p] == PageState::Remote && after[p] == PageState::Private) ||
                   (before[p] == PageState::Shared && after[p] == PageState::Private);
      CHECK(legal);
      CHECK(after[p] != PageState::Remote);
    }
  }
}

TEST_CASE("isolation: applying a trace to one space leaves siblings untouched") {
  const std::uint64_t pages = 64;
  PageStore store;
  Rng rng(41);
  std::map<PageNumber, ContentHash> image;
  for (PageNumber p = 0; p < pages; p++) image[p] = store.put(random_page(rng));

  StoreSpaceHooks hooks(store);
  AddressSpace a(pages, &hooks), b(pages, &hooks);
  a.set_source("img:t");
  b.set_source("img:t");
  for (const auto& [p, h] : image) {
    a.mark_remote(p);
    b.mark_remote(p);
  }
  // Stream a few pages into b, then snapshot its states.
  FakeStream stream_b{store, image, b};
  for (PageNumber p = 0; p < 8; p++) stream_b(p);
  std::vector<PageState> b_before(pages);
  for (PageNumber p = 0; p < pages; p++) b_before[p] = b.state(p);

  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Uniform;
  w.ops_per_second = 500.0;
  w.write_fraction = 0.6;
  w.seed = 3;
  GuestVm vm = create_vm("iso", pages, w, {"iso", "n"});
  FakeStream stream_a{store, image, a};
  apply_trace(a, generate_trace(vm, 1.0), std::ref(stream_a));

  for (PageNumber p = 0; p < pages; p++) CHECK(b.state(p) == b_before[p]);
}

TEST_CASE("workload program cursor agrees with generate_trace") {
  WorkloadSpec w;
  w.kind = WorkloadSpec::Kind::Uniform;
  w.ops_per_second = 250.0;
  w.write_fraction = 0.25;
  w.seed = 55;
  GuestVm vm = create_vm("cur", 512, w, {"cur", "n"});
  AccessTrace tr = generate_trace(vm, 4.0);
  WorkloadProgram prog(vm.workload, 512);
  for (std::size_t i = 0; i < tr.size(); i++) {
    Access a = prog.op(i);
    CHECK(a.page == tr[i].page);
    CHECK(a.is_write == tr[i].is_write);
    CHECK(a.at_us == tr[i].at_us);
    if (a.is_write) CHECK(a.content == tr[i].content);
  }
}
