#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace tilelm {

struct NumaNode {
  int id = 0;
  std::vector<int> cores;
  bool operator==(const NumaNode&) const = default;
};

enum class TopologySource { Detected, Configured, FallbackSingleNode };
const char* to_string(TopologySource source);

struct Topology {
  std::vector<NumaNode> nodes;
  TopologySource source = TopologySource::FallbackSingleNode;

  // Throws InvalidConfig on duplicate node ids, empty or overlapping core lists.
  void validate() const;
};

// {"nodes": [{"id": 0, "cores": [0, 1, ...]}, ...]}
Topology parse_topology(const nlohmann::json& j);
Topology load_topology_file(const std::filesystem::path& path);

// Reads the node/cpu map under sysfs_root (normally /sys/devices/system/node).
// Never throws: any failure yields one node holding every online core.
Topology detect_topology(const std::filesystem::path& sysfs_root = "/sys/devices/system/node");

// Parses kernel cpulist syntax such as "0-3,8,10-11".
std::vector<int> parse_cpulist(const std::string& text);

struct WorkerSlot {
  int node_id = 0;
  std::vector<int> cores;
  std::size_t thread_count = 1;
  bool operator==(const WorkerSlot&) const = default;
};

struct WorkerPlan {
  std::vector<WorkerSlot> workers;
  bool operator==(const WorkerPlan&) const = default;
};

// nullopt means auto: one worker per node, threads = max(1, cores - 1).
// Throws InfeasiblePlan for more workers than nodes or threads > cores.
WorkerPlan plan_workers(const Topology& topology, std::optional<std::size_t> workers,
                        std::optional<std::size_t> threads_per_worker);

// Best-effort affinity for the calling thread. Returns false (and leaves the
// thread unpinned) when the OS refuses.
bool pin_current_thread(std::span<const int> cores);

}  // namespace tilelm
