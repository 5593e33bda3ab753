#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "tilelm/metrics.hpp"
#include "tilelm/model.hpp"
#include "tilelm/scheduler.hpp"
#include "tilelm/topology.hpp"

namespace tilelm {

struct ClusterConfig {
  std::size_t tiles_per_worker = 1024;
  std::size_t tile_size = 16;
  AllocMode alloc_mode = AllocMode::Tiled;
  EngineConfig engine;
  std::size_t queue_capacity = 10000;  // outstanding requests before QueueFull
  bool pin_threads = true;
};

// Immutable view a worker publishes after every step.
struct WorkerSnapshot {
  ThroughputReport report;
  PoolStats pool;
  std::size_t queued = 0;
  std::size_t running = 0;
  std::uint64_t preemptions = 0;
  bool pinned = false;
};

// nullopt: the request was aborted (shutdown) before completing.
using CompletionCallback = std::function<void(std::optional<Completion>)>;

// Least outstanding prompt-plus-budget tokens; ties go to the lowest index.
std::size_t pick_worker(std::span<const std::uint64_t> outstanding_tokens);

class Worker {
 public:
  Worker(std::size_t index, WorkerSlot slot, std::shared_ptr<const Model> model,
         const ClusterConfig& config);
  ~Worker();

  Worker(const Worker&) = delete;
  Worker& operator=(const Worker&) = delete;

  std::size_t index() const { return index_; }
  const WorkerSlot& slot() const { return slot_; }

  // Throws PromptTooLong / InvalidConfig without touching engine state.
  void validate(const Request& request) const;

  // Threaded mode.
  void start(std::chrono::steady_clock::time_point epoch);
  void stop();
  void enqueue(Request request, CompletionCallback done);

  // Single-lane mode, driven by the simulated bench.
  Engine& engine() { return engine_; }
  void credit(const Completion& c, double at_seconds);

  std::shared_ptr<const WorkerSnapshot> snapshot() const;
  std::uint64_t outstanding_tokens() const { return outstanding_.load(); }
  void add_outstanding(std::uint64_t tokens) { outstanding_ += tokens; }
  void release_outstanding(std::uint64_t tokens) { outstanding_ -= tokens; }
  void publish();

 private:
  void run();

  std::size_t index_;
  WorkerSlot slot_;
  Engine engine_;
  std::chrono::steady_clock::time_point epoch_{};

  std::mutex inbox_mu_;
  std::condition_variable inbox_cv_;
  std::vector<std::pair<Request, CompletionCallback>> inbox_;
  bool stopping_ = false;
  bool accepting_ = false;
  std::thread thread_;
  std::unordered_map<SeqId, std::pair<CompletionCallback, std::uint64_t>> waiting_;

  std::atomic<std::uint64_t> outstanding_{0};
  std::uint64_t processed_ = 0, generated_ = 0, requests_ = 0;
  double last_completion_s_ = 0.0;
  bool pinned_ = false;
  mutable std::mutex snapshot_mu_;
  std::shared_ptr<const WorkerSnapshot> snapshot_;
};

struct BenchRun {
  ServerReport report;
  std::vector<Completion> completions;  // indexed like the input trace
  std::uint64_t preemptions = 0;
};

// One worker per planned slot, each with a private tile pool over the shared
// read-only model, fed by a least-outstanding-work dispatcher.
class Cluster {
 public:
  Cluster(std::shared_ptr<const Model> model, WorkerPlan plan, ClusterConfig config);
  ~Cluster();

  const WorkerPlan& plan() const { return plan_; }
  const ClusterConfig& config() const { return config_; }
  std::size_t size() const { return workers_.size(); }
  const Model& model() const { return *model_; }

  void start();
  void stop();
  bool running() const { return started_; }

  // Validates, picks a worker and enqueues. Throws PromptTooLong,
  // InvalidConfig or QueueFull. Returns the chosen worker index.
  std::size_t submit(Request request, CompletionCallback done);

  ServerReport report() const;
  nlohmann::json metrics() const;

  // Replays a trace from a fresh cluster state. Simulated clock runs every
  // worker on the calling thread in event order; wall clock uses the worker
  // threads and real arrival delays.
  BenchRun run_trace(const std::vector<Request>& trace, ClockMode clock);

 private:
  std::size_t dispatch(const Request& request);
  BenchRun run_simulated(const std::vector<Request>& trace);
  BenchRun run_wall(const std::vector<Request>& trace);

  std::shared_ptr<const Model> model_;
  WorkerPlan plan_;
  ClusterConfig config_;
  std::vector<std::unique_ptr<Worker>> workers_;
  std::mutex dispatch_mu_;
  std::atomic<std::uint64_t> outstanding_requests_{0};
  bool started_ = false;
  std::chrono::steady_clock::time_point epoch_;
};

}  // namespace tilelm
