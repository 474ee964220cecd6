#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "vms/common.hpp"

namespace {

namespace fs = std::filesystem;

struct CmdResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string shell_quote(const std::string& s) { return "'" + s + "'"; }

CmdResult run_vmsctl(const std::string& args, const fs::path& store) {
  fs::path err_file = fs::temp_directory_path() /
                      ("vmsctl_err_" + std::to_string(::getpid()) + ".txt");
  std::string cmd = "VMSCTL_STORE=" + shell_quote(store.string()) + " " + VMSCTL_BIN +
                    " " + args + " 2>" + shell_quote(err_file.string());
  CmdResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream ef(err_file);
  r.err = std::string(std::istreambuf_iterator<char>(ef), std::istreambuf_iterator<char>());
  fs::remove(err_file);
  return r;
}

fs::path fresh_store(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

const char* kSmallScenario = R"JSON({
  "format_version": 1,
  "seed": 7,
  "parameters": {"boot_duration_s": 0.5, "ready_ops": 20},
  "hosts": [
    {"host_id": "h0", "ram_bytes": 17179869184, "nic_bits_per_s": 10000000000},
    {"host_id": "h1", "ram_bytes": 17179869184, "nic_bits_per_s": 10000000000}
  ],
  "templates": [
    {"name": "t", "memory_pages": 4096, "disk_bytes": 16777216,
     "expected_touch_fraction": 0.25,
     "workload": {"kind": "sequential", "write_fraction": 0.0, "ops_per_second": 200.0}},
    {"name": "t-fill", "memory_pages": 4096, "disk_bytes": 16777216,
     "expected_touch_fraction": 1.0,
     "workload": {"kind": "sequential", "write_fraction": 1.0, "ops_per_second": 2000.0}}
  ],
  "script": [
    {"at_s": 0.0, "cmd": "boot_vm", "vm": "parent", "template": "t",
     "host": "h0", "workload_template": "t-fill"},
    {"at_s": 3.0, "cmd": "create_image", "image": "img", "vm": "parent"},
    {"at_s": 4.0, "cmd": "clone_vm", "image": "img", "count": 3, "hosts": ["h1"],
     "workload_template": "t"},
    {"at_s": 4.0, "cmd": "run_for", "seconds": 4.0}
  ]
})JSON";

}  // namespace

TEST_CASE("workflow: boot, snapshot, clone start, migrate, list") {
  auto store = fresh_store("vmsctl_wf");
  auto img = store / "img.vms";

  auto boot = run_vmsctl("boot --template tiny --host h0 --vm demo", store);
  CHECK(boot.exit_code == 0);
  CHECK(boot.out.find("vm demo") != std::string::npos);
  CHECK(boot.out.find("status=running") != std::string::npos);

  auto create = run_vmsctl("image create --vm demo --out " + shell_quote(img.string()),
                           store);
  CHECK(create.exit_code == 0);
  CHECK(create.out.find("image img") != std::string::npos);
  CHECK(fs::exists(img));
  CHECK(!fs::exists(img.string() + ".tmp"));  // no partial files left behind

  auto start = run_vmsctl("image start " + shell_quote(img.string()) +
                              " --host h0 --hostname c1",
                          store);
  CHECK(start.exit_code == 0);
  // The clone is listed as running with its overridden hostname.
  CHECK(start.out.find("status=running") != std::string::npos);
  CHECK(start.out.find("hostname=c1") != std::string::npos);
  CHECK(start.out.find("resident_bytes=") != std::string::npos);

  std::string clone_id = start.out.substr(3, start.out.find(' ', 3) - 3);
  auto mig = run_vmsctl("migrate --vm " + clone_id + " --to h2 --mode precopy", store);
  CHECK(mig.exit_code == 0);
  CHECK(mig.out.find("migrated " + clone_id) != std::string::npos);
  CHECK(mig.out.find("h0->h2") != std::string::npos);

  auto list = run_vmsctl("image list " + shell_quote(store.string()), store);
  CHECK(list.exit_code == 0);
  CHECK(list.out.find("img") != std::string::npos);

  // Post-copy also works across invocations (world state persisted).
  auto mig2 = run_vmsctl("migrate --vm " + clone_id + " --to h3 --mode postcopy", store);
  CHECK(mig2.exit_code == 0);
  CHECK(mig2.out.find("mode=postcopy") != std::string::npos);
}

TEST_CASE("error contract: unknown vm prints a machine-parsable line, exit 1") {
  auto store = fresh_store("vmsctl_err");
  auto r = run_vmsctl("migrate --vm v1 --to h2 --mode precopy", store);
  CHECK(r.exit_code == 1);
  CHECK(r.err == "error: UnknownVm: v1\n");
  CHECK(r.out.empty());
}

TEST_CASE("usage errors exit 2 with usage text") {
  auto store = fresh_store("vmsctl_usage");
  auto bad_verb = run_vmsctl("frobnicate", store);
  CHECK(bad_verb.exit_code == 2);
  auto bad_flag = run_vmsctl("boot --template tiny --host h0 --bogus 1", store);
  CHECK(bad_flag.exit_code == 2);
  CHECK((bad_flag.err.find("Usage") != std::string::npos ||
         bad_flag.err.find("usage") != std::string::npos ||
         bad_flag.err.find("SUBCOMMAND") != std::string::npos));
  auto missing = run_vmsctl("image create --vm demo", store);  // --out required
  CHECK(missing.exit_code == 2);
}

TEST_CASE("help enumerates every verb and flag the dispatcher implements") {
  auto store = fresh_store("vmsctl_help");
  auto top = run_vmsctl("--help", store);
  CHECK(top.exit_code == 0);
  for (const char* verb : {"image", "boot", "migrate", "sim", "report"})
    CHECK(top.out.find(verb) != std::string::npos);

  auto image_help = run_vmsctl("image --help", store);
  for (const char* sub : {"create", "start", "list"})
    CHECK(image_help.out.find(sub) != std::string::npos);

  auto icreate = run_vmsctl("image create --help", store);
  for (const char* flag : {"--vm", "--out"})
    CHECK(icreate.out.find(flag) != std::string::npos);
  auto istart = run_vmsctl("image start --help", store);
  for (const char* flag : {"--host", "--hostname", "--net-id", "--vm-id"})
    CHECK(istart.out.find(flag) != std::string::npos);
  auto boot = run_vmsctl("boot --help", store);
  for (const char* flag : {"--template", "--host", "--vm"})
    CHECK(boot.out.find(flag) != std::string::npos);
  auto mig = run_vmsctl("migrate --help", store);
  for (const char* flag : {"--vm", "--to", "--mode"})
    CHECK(mig.out.find(flag) != std::string::npos);
  auto srun = run_vmsctl("sim run --help", store);
  for (const char* flag : {"--seed", "--out", "--live"})
    CHECK(srun.out.find(flag) != std::string::npos);
  auto rcmp = run_vmsctl("report compare --help", store);
  CHECK(rcmp.out.find("baseline") != std::string::npos);
  CHECK(top.out.find("--store") != std::string::npos);
}

TEST_CASE("sim run: identical seeds give byte-identical report directories") {
  auto store = fresh_store("vmsctl_sim");
  auto scen = store / "scenario.json";
  {
    std::ofstream out(scen);
    out << kSmallScenario;
  }
  auto d1 = store / "rep1";
  auto d2 = store / "rep2";
  auto r1 = run_vmsctl("sim run " + shell_quote(scen.string()) + " --seed 7 --out " +
                           shell_quote(d1.string()),
                       store);
  auto r2 = run_vmsctl("sim run " + shell_quote(scen.string()) + " --seed 7 --out " +
                           shell_quote(d2.string()),
                       store);
  REQUIRE(r1.exit_code == 0);
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(d1 / "metrics.log") == slurp(d2 / "metrics.log"));
  CHECK(slurp(d1 / "summary.json") == slurp(d2 / "summary.json"));
  // Stdout is identical apart from the report path itself.
  auto tail_of = [](const std::string& s) { return s.substr(s.find(" vms=")); };
  CHECK(tail_of(r1.out) == tail_of(r2.out));

  // A different seed changes workload draws; the report is well-formed too.
  auto d3 = store / "rep3";
  auto r3 = run_vmsctl("sim run " + shell_quote(scen.string()) + " --seed 8 --out " +
                           shell_quote(d3.string()),
                       store);
  REQUIRE(r3.exit_code == 0);
  CHECK(slurp(d3 / "summary.json").find("\"format_version\": 1") != std::string::npos);
}

TEST_CASE("sim run --live produces a complete report over the socket server") {
  auto store = fresh_store("vmsctl_live");
  auto scen = store / "scenario.json";
  {
    std::ofstream out(scen);
    out << kSmallScenario;
  }
  auto d = store / "rep-live";
  auto r = run_vmsctl("sim run " + shell_quote(scen.string()) + " --seed 7 --out " +
                          shell_quote(d.string()) + " --live",
                      store);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("ready=4") != std::string::npos);  // parent + 3 clones
}

TEST_CASE("report compare computes the three ratios from two report dirs") {
  auto store = fresh_store("vmsctl_cmp");
  // Baseline: boots only. Streaming run: clones of the same template.
  std::string baseline = R"JSON({
    "format_version": 1, "seed": 3,
    "parameters": {"boot_duration_s": 2.0, "ready_ops": 20},
    "hosts": [{"host_id": "h0"}],
    "templates": [
      {"name": "t", "memory_pages": 4096, "disk_bytes": 67108864,
       "expected_touch_fraction": 0.25,
       "workload": {"kind": "sequential", "write_fraction": 0.0, "ops_per_second": 200.0}},
      {"name": "t-fill", "memory_pages": 4096, "disk_bytes": 67108864,
       "expected_touch_fraction": 1.0,
       "workload": {"kind": "sequential", "write_fraction": 1.0, "ops_per_second": 2000.0}}
    ],
    "script": [
      {"at_s": 0.0, "cmd": "boot_vm", "vm": "b0", "template": "t", "host": "h0"},
      {"at_s": 0.0, "cmd": "run_for", "seconds": 6.0}
    ]
  })JSON";
  std::string vms_run = R"JSON({
    "format_version": 1, "seed": 3,
    "parameters": {"boot_duration_s": 2.0, "ready_ops": 20},
    "hosts": [{"host_id": "h0"}, {"host_id": "h1"}],
    "templates": [
      {"name": "t", "memory_pages": 4096, "disk_bytes": 67108864,
       "expected_touch_fraction": 0.25,
       "workload": {"kind": "sequential", "write_fraction": 0.0, "ops_per_second": 200.0}},
      {"name": "t-fill", "memory_pages": 4096, "disk_bytes": 67108864,
       "expected_touch_fraction": 1.0,
       "workload": {"kind": "sequential", "write_fraction": 1.0, "ops_per_second": 2000.0}}
    ],
    "script": [
      {"at_s": 0.0, "cmd": "boot_vm", "vm": "parent", "template": "t",
       "host": "h1", "workload_template": "t-fill"},
      {"at_s": 5.0, "cmd": "create_image", "image": "img", "vm": "parent"},
      {"at_s": 6.0, "cmd": "clone_vm", "image": "img", "count": 2, "hosts": ["h0"],
       "workload_template": "t"},
      {"at_s": 6.0, "cmd": "run_for", "seconds": 6.0}
    ]
  })JSON";
  {
    std::ofstream(store / "baseline.json") << baseline;
    std::ofstream(store / "vms.json") << vms_run;
  }
  auto rb = run_vmsctl("sim run " + shell_quote((store / "baseline.json").string()) +
                           " --out " + shell_quote((store / "rb").string()),
                       store);
  auto rv = run_vmsctl("sim run " + shell_quote((store / "vms.json").string()) +
                           " --out " + shell_quote((store / "rv").string()),
                       store);
  REQUIRE(rb.exit_code == 0);
  REQUIRE(rv.exit_code == 0);
  auto cmp = run_vmsctl("report compare " + shell_quote((store / "rb").string()) + " " +
                            shell_quote((store / "rv").string()),
                        store);
  REQUIRE(cmp.exit_code == 0);
  double speedup = 0, density = 0, io = 0;
  REQUIRE(std::sscanf(cmp.out.c_str(), "speedup=%lf\ndensity_ratio=%lf\nio_ratio=%lf",
                      &speedup, &density, &io) == 3);
  CHECK(speedup > 1.0);  // clones skip the 2 s boot and the disk copy
  CHECK(io > 1.0);
}

TEST_CASE("cli world state is deterministic across rebuilds") {
  auto s1 = fresh_store("vmsctl_det1");
  auto s2 = fresh_store("vmsctl_det2");
  for (const auto& store : {s1, s2}) {
    auto b = run_vmsctl("boot --template tiny --host h0 --vm demo", store);
    REQUIRE(b.exit_code == 0);
    auto c = run_vmsctl(
        "image create --vm demo --out " + shell_quote((store / "i.vms").string()), store);
    REQUIRE(c.exit_code == 0);
  }
  // Identical apart from the store directory embedded in image paths.
  auto normalized = [](const fs::path& store) {
    std::string w = slurp(store / "world.json");
    std::string needle = store.string();
    for (std::size_t at = w.find(needle); at != std::string::npos;
         at = w.find(needle, at))
      w.replace(at, needle.size(), "STORE");
    return w;
  };
  CHECK(normalized(s1) == normalized(s2));
  CHECK(run_vmsctl("image list " + shell_quote(s1.string()), s1).out ==
        run_vmsctl("image list " + shell_quote(s2.string()), s2).out);
}
