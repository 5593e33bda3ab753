#include "tilelm/topology.hpp"

#include <pthread.h>
#include <sched.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "tilelm/errors.hpp"

namespace tilelm {

const char* to_string(TopologySource source) {
  switch (source) {
    case TopologySource::Detected: return "detected";
    case TopologySource::Configured: return "configured";
    case TopologySource::FallbackSingleNode: return "fallback-single-node";
  }
  return "?";
}

void Topology::validate() const {
  if (nodes.empty()) throw InvalidConfig("topology has no nodes");
  std::set<int> ids, cores;
  for (const auto& n : nodes) {
    if (!ids.insert(n.id).second) throw InvalidConfig("duplicate node id " + std::to_string(n.id));
    if (n.cores.empty()) throw InvalidConfig("node " + std::to_string(n.id) + " has no cores");
    for (int c : n.cores) {
      if (c < 0) throw InvalidConfig("negative core id");
      if (!cores.insert(c).second)
        throw InvalidConfig("core " + std::to_string(c) + " listed in more than one node");
    }
  }
}

Topology parse_topology(const nlohmann::json& j) {
  Topology t;
  t.source = TopologySource::Configured;
  try {
    for (const auto& n : j.at("nodes"))
      t.nodes.push_back({n.at("id").get<int>(), n.at("cores").get<std::vector<int>>()});
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("malformed topology: ") + e.what());
  }
  t.validate();
  return t;
}

Topology load_topology_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open topology file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("malformed topology file: ") + e.what());
  }
  return parse_topology(j);
}

std::vector<int> parse_cpulist(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part.erase(std::remove_if(part.begin(), part.end(), ::isspace), part.end());
    if (part.empty()) continue;
    const auto dash = part.find('-');
    const int lo = std::stoi(part.substr(0, dash));
    const int hi = dash == std::string::npos ? lo : std::stoi(part.substr(dash + 1));
    for (int c = lo; c <= hi; ++c) out.push_back(c);
  }
  return out;
}

namespace {

Topology fallback_topology() {
  Topology t;
  t.source = TopologySource::FallbackSingleNode;
  const unsigned n = std::max(1u, std::thread::hardware_concurrency());
  NumaNode node;
  for (unsigned c = 0; c < n; ++c) node.cores.push_back(static_cast<int>(c));
  t.nodes.push_back(std::move(node));
  return t;
}

}  // namespace

Topology detect_topology(const std::filesystem::path& sysfs_root) {
  try {
    Topology t;
    t.source = TopologySource::Detected;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(sysfs_root, ec)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("node", 0) != 0 || name.size() == 4 ||
          !std::all_of(name.begin() + 4, name.end(), ::isdigit))
        continue;
      std::ifstream in(entry.path() / "cpulist");
      std::string line;
      if (!in || !std::getline(in, line)) continue;
      auto cores = parse_cpulist(line);
      if (cores.empty()) continue;  // memory-only node
      t.nodes.push_back({std::stoi(name.substr(4)), std::move(cores)});
    }
    if (ec || t.nodes.empty()) return fallback_topology();
    std::sort(t.nodes.begin(), t.nodes.end(), [](auto& a, auto& b) { return a.id < b.id; });
    t.validate();
    return t;
  } catch (...) {
    return fallback_topology();
  }
}

WorkerPlan plan_workers(const Topology& topology, std::optional<std::size_t> workers,
                        std::optional<std::size_t> threads_per_worker) {
  topology.validate();
  const std::size_t n_workers = workers.value_or(topology.nodes.size());
  if (n_workers < 1) throw InfeasiblePlan("at least one worker is required");
  if (n_workers > topology.nodes.size())
    throw InfeasiblePlan(std::to_string(n_workers) + " workers requested but topology has " +
                         std::to_string(topology.nodes.size()) + " nodes");
  WorkerPlan plan;
  for (std::size_t i = 0; i < n_workers; ++i) {
    const auto& node = topology.nodes[i];
    WorkerSlot slot;
    slot.node_id = node.id;
    slot.cores = node.cores;
    if (threads_per_worker) {
      if (*threads_per_worker < 1 || *threads_per_worker > node.cores.size())
        throw InfeasiblePlan(std::to_string(*threads_per_worker) + " threads requested on node " +
                             std::to_string(node.id) + " with " +
                             std::to_string(node.cores.size()) + " cores");
      slot.thread_count = *threads_per_worker;
    } else {
      slot.thread_count = std::max<std::size_t>(1, node.cores.size() - 1);
    }
    plan.workers.push_back(std::move(slot));
  }
  return plan;
}

bool pin_current_thread(std::span<const int> cores) {
  if (cores.empty()) return false;
  cpu_set_t set;
  CPU_ZERO(&set);
  for (int c : cores) {
    if (c < 0 || c >= CPU_SETSIZE) return false;
    CPU_SET(c, &set);
  }
  return pthread_setaffinity_np(pthread_self(), sizeof(set), &set) == 0;
}

}  // namespace tilelm
