#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "doctest.h"
#include "tilelm/cluster.hpp"
#include "tilelm/errors.hpp"
#include "tilelm/metrics.hpp"
#include "tilelm/topology.hpp"

using namespace tilelm;
namespace fs = std::filesystem;

namespace {

Topology nodes_of(std::size_t n, int cores_each) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> cores;
    for (int c = 0; c < cores_each; ++c) cores.push_back(static_cast<int>(i) * cores_each + c);
    j["nodes"].push_back({{"id", i}, {"cores", cores}});
  }
  return parse_topology(j);
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tilelm_topo_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("cpulist syntax") {
  CHECK(parse_cpulist("0-3,8,10-11\n") == std::vector<int>{0, 1, 2, 3, 8, 10, 11});
  CHECK(parse_cpulist("5") == std::vector<int>{5});
  CHECK(parse_cpulist("").empty());
}

TEST_CASE("detect_topology from a fake sysfs tree") {
  const auto root = scratch_dir("sysfs");
  fs::create_directories(root / "node0");
  fs::create_directories(root / "node1");
  fs::create_directories(root / "node2");  // memory-only
  fs::create_directories(root / "possible");
  std::ofstream(root / "node0" / "cpulist") << "0-3\n";
  std::ofstream(root / "node1" / "cpulist") << "4-7\n";
  std::ofstream(root / "node2" / "cpulist") << "\n";
  const Topology t = detect_topology(root);
  CHECK(t.source == TopologySource::Detected);
  REQUIRE(t.nodes.size() == 2);
  CHECK(t.nodes[1] == NumaNode{1, {4, 5, 6, 7}});
  fs::remove_all(root);
}

TEST_CASE("detect_topology falls back to one node with every core") {
  const Topology t = detect_topology("/nonexistent/sysfs/path");
  CHECK(t.source == TopologySource::FallbackSingleNode);
  REQUIRE(t.nodes.size() == 1);
  CHECK(t.nodes[0].cores.size() == std::max(1u, std::thread::hardware_concurrency()));
  CHECK_NOTHROW(detect_topology());
}

TEST_CASE("configured topology file") {
  const auto dir = scratch_dir("file");
  const auto path = dir / "topo.json";
  std::ofstream(path) << R"({"nodes":[{"id":0,"cores":[0,1]},{"id":1,"cores":[2,3]},)"
                      << R"({"id":2,"cores":[4,5]},{"id":3,"cores":[6,7]}]})";
  const Topology t = load_topology_file(path);
  CHECK(t.source == TopologySource::Configured);
  REQUIRE(t.nodes.size() == 4);
  CHECK(t.nodes[2].cores == std::vector<int>{4, 5});

  std::ofstream(path) << R"({"nodes":[{"id":0,"cores":[0,1]},{"id":1,"cores":[1,2]}]})";
  CHECK_THROWS_AS(load_topology_file(path), InvalidConfig);
  std::ofstream(path) << R"({"nodes":[{"id":0,"cores":[0]},{"id":0,"cores":[1]}]})";
  CHECK_THROWS_AS(load_topology_file(path), InvalidConfig);
  std::ofstream(path) << R"({"nodes":[{"id":0}]})";
  CHECK_THROWS_AS(load_topology_file(path), InvalidConfig);
  CHECK_THROWS_AS(load_topology_file(dir / "missing.json"), InvalidConfig);
  fs::remove_all(dir);
}

TEST_CASE("plan_workers") {
  const WorkerPlan p = plan_workers(nodes_of(4, 16), std::nullopt, std::nullopt);
  REQUIRE(p.workers.size() == 4);
  std::set<int> seen;
  for (const auto& w : p.workers) {
    CHECK(w.thread_count == 15);
    for (int c : w.cores) CHECK(seen.insert(c).second);
  }
  CHECK(p == plan_workers(nodes_of(4, 16), std::nullopt, std::nullopt));

  const WorkerPlan one = plan_workers(nodes_of(1, 8), 1, 8);
  CHECK(one.workers.at(0).thread_count == 8);
  CHECK(plan_workers(nodes_of(1, 1), std::nullopt, std::nullopt).workers.at(0).thread_count == 1);

  CHECK_THROWS_AS(plan_workers(nodes_of(2, 4), 3, std::nullopt), InfeasiblePlan);
  CHECK_THROWS_AS(plan_workers(nodes_of(1, 8), 1, 9), InfeasiblePlan);
  CHECK_THROWS_AS(plan_workers(nodes_of(1, 8), 0, std::nullopt), InfeasiblePlan);
}

TEST_CASE("pinning is best effort") {
  const std::vector<int> bogus{CPU_SETSIZE + 5};
  CHECK_FALSE(pin_current_thread(bogus));
  CHECK_FALSE(pin_current_thread({}));
}

TEST_CASE("pick_worker") {
  const std::vector<std::uint64_t> idle{0, 0, 0, 0};
  CHECK(pick_worker(idle) == 0);
  const std::vector<std::uint64_t> busy{1000, 0};
  CHECK(pick_worker(busy) == 1);
  CHECK_THROWS_AS(pick_worker({}), InvalidConfig);

  // Equal requests over four idle workers land one each.
  std::vector<std::uint64_t> load(4, 0);
  std::vector<int> hits(4, 0);
  for (int r = 0; r < 4; ++r) {
    const std::size_t w = pick_worker(load);
    load[w] += 120;
    ++hits[w];
  }
  CHECK(hits == std::vector<int>{1, 1, 1, 1});
}

TEST_CASE("aggregate") {
  // Four workers over equal wall time; tokens chosen so each rate is exact.
  const double wall = 100.0;
  std::vector<ThroughputReport> w;
  for (double rate : {466.56, 465.49, 460.61, 459.66})
    w.push_back(ThroughputReport::make(static_cast<std::uint64_t>(std::llround(rate * wall)), 0, 1, wall));
  const ServerReport s = aggregate(w);
  CHECK(std::abs(s.aggregate.processed_tok_per_s - 1852.32) <= 0.01);
  CHECK(s.aggregate.processed_tokens == 46656 + 46549 + 46061 + 45966);

  const auto single = aggregate(std::vector<ThroughputReport>{w[0]});
  CHECK(single.aggregate == w[0]);

  const std::vector<ThroughputReport> uneven{ThroughputReport::make(300, 100, 3, 10.0),
                                             ThroughputReport::make(500, 50, 2, 20.0)};
  const auto u = aggregate(uneven);
  CHECK(u.aggregate.processed_tokens == 800);
  CHECK(u.aggregate.generated_tokens == 150);
  CHECK(u.aggregate.request_count == 5);
  CHECK(u.aggregate.wall_time_s == 20.0);
  CHECK(u.aggregate.processed_tok_per_s == 40.0);
  CHECK(u.aggregate.generated_tok_per_s == 7.5);
  CHECK_THROWS(aggregate(std::vector<ThroughputReport>{}));
}

TEST_CASE("report arithmetic") {
  const auto r = ThroughputReport::make(1000, 300, 4, 8.0);
  CHECK(r.processed_tok_per_s == 125.0);
  CHECK(r.generated_tok_per_s == 37.5);
  const auto zero = ThroughputReport::make(0, 0, 0, 0.0);
  CHECK(zero.processed_tok_per_s == 0.0);
  CHECK(format_mm_ss(27.4) == "0:27");
  CHECK(format_mm_ss(196.0) == "3:16");
  CHECK(format_mm_ss(3665.0) == "61:05");
}
