// Persistent operator world behind vmsctl: hosts, templates, VMs, and images
// live under the shared-store directory and survive between invocations.
// Each command rebuilds a simulator from the persisted state, applies one
// step of virtual time, and writes the world back.
#ifndef VMS_CLI_WORLD_HPP
#define VMS_CLI_WORLD_HPP

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "vms/sim.hpp"

namespace vms {

class CliWorld {
 public:
  // Opens (or initializes) the world in store_dir.
  explicit CliWorld(std::filesystem::path store_dir);

  std::string boot(const std::optional<std::string>& vm_id, const std::string& tmpl,
                   const std::string& host);
  std::string image_create(const std::string& vm_id, const std::filesystem::path& out);
  std::string image_start(const std::filesystem::path& image_path, const std::string& host,
                          const std::optional<std::string>& hostname,
                          const std::optional<std::string>& net_id,
                          const std::optional<std::string>& vm_id);
  std::string migrate(const std::string& vm_id, const std::string& to_host,
                      const std::string& mode);

  static std::string image_list(const std::filesystem::path& dir);

  TimeUs now() const { return sim_->now(); }

 private:
  void load_or_init();
  void build_sim();
  void save();
  std::string fresh_vm_id();
  std::filesystem::path space_path(const std::string& vm_id) const;

  std::filesystem::path dir_;
  Scenario base_;  // hosts + templates + params; script always empty
  TimeUs now_us_ = 0;
  std::uint64_t vm_counter_ = 0;
  double warmup_s_ = 3.0;
  // image_id -> (file path, source template)
  std::vector<std::tuple<std::string, std::string, std::string>> images_;
  std::vector<std::string> vm_ids_;
  std::unique_ptr<ClusterSim> sim_;
};

void write_vm_state(const ClusterSim::VmState& st, const std::filesystem::path& path);
ClusterSim::VmState read_vm_state(const std::filesystem::path& path);

}  // namespace vms

#endif
