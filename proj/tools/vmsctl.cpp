// vmsctl: operator front-end for live-image workflows and the cluster
// simulator. Exit codes: 0 success, 1 domain error, 2 usage error.
#include <cstdlib>
#include <unistd.h>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vms/cli_world.hpp"
#include "vms/metrics.hpp"
#include "vms/sim.hpp"

namespace {

std::string resolve_store(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("VMSCTL_STORE"); env && *env) return env;
  return "vmsctl_store";
}

struct Opts {
  std::string store;
  // image create
  std::string create_vm, create_out;
  // image start
  std::string start_path, start_host;
  std::string start_hostname, start_netid, start_vmid;
  // image list
  std::string list_dir;
  // boot
  std::string boot_template, boot_host, boot_vmid;
  // migrate
  std::string mig_vm, mig_to, mig_mode;
  // sim run
  std::string sim_scenario, sim_out;
  std::uint64_t sim_seed = 0;
  bool sim_seed_set = false;
  bool sim_live = false;
  // report compare
  std::string cmp_baseline, cmp_vms;
};

std::optional<std::string> opt_of(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vmsctl - live-image provisioning, streaming and migration workbench"};
  app.require_subcommand(1);
  Opts o;
  app.add_option("--store", o.store,
                 "shared-store directory (overrides VMSCTL_STORE; default vmsctl_store)");

  auto* image = app.add_subcommand("image", "live-image operations");
  image->require_subcommand(1);
  auto* icreate = image->add_subcommand("create", "snapshot a running VM into a live image");
  icreate->add_option("--vm", o.create_vm, "source VM id")->required();
  icreate->add_option("--out", o.create_out, "output image path (.vms)")->required();
  auto* istart = image->add_subcommand("start", "launch a clone from a live image");
  istart->add_option("image", o.start_path, "live image file")->required();
  istart->add_option("--host", o.start_host, "destination host id")->required();
  istart->add_option("--hostname", o.start_hostname, "hostname override for the clone");
  istart->add_option("--net-id", o.start_netid, "network identity override");
  istart->add_option("--vm-id", o.start_vmid, "explicit VM id for the clone");
  auto* ilist = image->add_subcommand("list", "list live images in a directory");
  ilist->add_option("dir", o.list_dir, "directory holding .vms files")->required();

  auto* boot = app.add_subcommand("boot", "cold-boot a VM from a template disk image");
  boot->add_option("--template", o.boot_template, "template name")->required();
  boot->add_option("--host", o.boot_host, "host id")->required();
  boot->add_option("--vm", o.boot_vmid, "explicit VM id");

  auto* mig = app.add_subcommand("migrate", "live-migrate a VM to another host");
  mig->add_option("--vm", o.mig_vm, "VM id")->required();
  mig->add_option("--to", o.mig_to, "destination host id")->required();
  mig->add_option("--mode", o.mig_mode, "precopy|postcopy|stopcopy")->required();

  auto* sim = app.add_subcommand("sim", "cluster simulation");
  sim->require_subcommand(1);
  auto* srun = sim->add_subcommand("run", "run a scenario and write a report directory");
  srun->add_option("scenario", o.sim_scenario, "scenario file (JSON)")->required();
  auto* seed_opt = srun->add_option("--seed", o.sim_seed, "seed override");
  srun->add_option("--out", o.sim_out, "report output directory")->required();
  srun->add_flag("--live", o.sim_live, "serve demand pages over a local socket server");

  auto* report = app.add_subcommand("report", "report utilities");
  report->require_subcommand(1);
  auto* rcmp = report->add_subcommand("compare", "compare a baseline report with a VMS report");
  rcmp->add_option("baseline", o.cmp_baseline, "baseline report directory")->required();
  rcmp->add_option("vms", o.cmp_vms, "VMS report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }
  o.sim_seed_set = seed_opt->count() > 0;

  try {
    if (icreate->parsed()) {
      vms::CliWorld world(resolve_store(o.store));
      std::cout << world.image_create(o.create_vm, o.create_out);
    } else if (istart->parsed()) {
      vms::CliWorld world(resolve_store(o.store));
      std::cout << world.image_start(o.start_path, o.start_host, opt_of(o.start_hostname),
                                     opt_of(o.start_netid), opt_of(o.start_vmid));
    } else if (ilist->parsed()) {
      std::cout << vms::CliWorld::image_list(o.list_dir);
    } else if (boot->parsed()) {
      vms::CliWorld world(resolve_store(o.store));
      std::cout << world.boot(opt_of(o.boot_vmid), o.boot_template, o.boot_host);
    } else if (mig->parsed()) {
      vms::CliWorld world(resolve_store(o.store));
      std::cout << world.migrate(o.mig_vm, o.mig_to, o.mig_mode);
    } else if (srun->parsed()) {
      vms::Scenario scenario = vms::Scenario::load_file(o.sim_scenario);
      if (o.sim_seed_set) scenario.seed = o.sim_seed;
      vms::ClusterSim cluster(scenario);
      if (o.sim_live)
        cluster.enable_live_mode("/tmp/vmsctl-pages-" + std::to_string(::getpid()) +
                                 ".sock");
      vms::Metrics metrics = cluster.run();
      metrics.write_report(o.sim_out);
      std::uint64_t ready = 0;
      for (const auto& v : metrics.vms()) ready += v.ready ? 1 : 0;
      std::cout << "report " << o.sim_out << " vms=" << metrics.vms().size()
                << " ready=" << ready << " wire_bytes=" << metrics.wire_total()
                << " migrations=" << metrics.migrations().size() << "\n";
    } else if (rcmp->parsed()) {
      vms::ComparisonReport rep = vms::compare_reports(o.cmp_baseline, o.cmp_vms);
      char buf[160];
      std::snprintf(buf, sizeof(buf), "speedup=%.4f\ndensity_ratio=%.4f\nio_ratio=%.4f\n",
                    rep.speedup, rep.density_ratio, rep.io_ratio);
      std::cout << buf;
    }
  } catch (const vms::VmsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
