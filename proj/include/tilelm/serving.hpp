#pragma once

#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "tilelm/cluster.hpp"

namespace httplib {
class Server;
}

namespace tilelm {

struct HttpConfig {
  std::size_t max_new_tokens_cap = 1024;
  std::size_t handler_threads = 64;
};

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

// Request handling without the socket layer.
HttpReply handle_generate(Cluster& cluster, const HttpConfig& config, const std::string& body);

// POST /v1/generate, GET /v1/metrics, GET /v1/health over a running cluster.
class HttpServer {
 public:
  HttpServer(Cluster& cluster, HttpConfig config = {});
  ~HttpServer();

  // Binds host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  void serve_forever();  // blocks until stop()
  void start_background();
  void stop();

 private:
  Cluster& cluster_;
  HttpConfig config_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

struct BenchRow {
  std::size_t vcpu = 1;  // threads across all workers
  std::string model;
  std::size_t parallel = 1;
  BenchRun run;
};

struct BenchOptions {
  std::string model_path;
  std::string trace_path;  // empty: the seeded default 100-request trace, fitted to the model
  std::uint64_t trace_seed = 1;
  ClockMode clock = ClockMode::Simulated;
  std::vector<std::size_t> parallel{64};  // engine max_batch per run
  std::optional<std::size_t> workers;
  std::optional<std::size_t> threads_per_worker;
  std::string topology_path;  // empty: detect
  ClusterConfig cluster;
  GemmBackend backend = GemmBackend::Blocked;
};

// Loads the model and trace, then replays the trace on a fresh cluster once
// per parallelism setting.
std::vector<BenchRow> bench_run(const BenchOptions& options);
std::vector<BenchRow> bench_run(std::shared_ptr<const Model> model, const std::string& model_name,
                                const std::vector<Request>& trace, const BenchOptions& options);

// Pipe-separated table with the throughput column names used in the
// reference measurements; a trailing "Parallel requests" column is added
// when rows differ in parallelism.
std::string format_bench_table(const std::vector<BenchRow>& rows);
nlohmann::json bench_json(const std::vector<BenchRow>& rows);

}  // namespace tilelm
