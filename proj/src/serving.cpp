#include "tilelm/serving.hpp"

#include <future>
#include <sstream>

// The library default of 5 drops bursts of concurrent clients.
#define CPPHTTPLIB_LISTEN_BACKLOG 512
#include "httplib.h"
#include "tilelm/errors.hpp"
#include "tilelm/trace.hpp"

namespace tilelm {

namespace {

constexpr std::size_t kDefaultMaxNewTokens = 16;

HttpReply error_reply(int status, const std::string& message) {
  return {status, {{"error", message}}};
}

std::string dump(const nlohmann::json& j) {
  // Generated bytes need not be valid UTF-8.
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

}  // namespace

HttpReply handle_generate(Cluster& cluster, const HttpConfig& config, const std::string& body) {
  Request req;
  try {
    const auto j = nlohmann::json::parse(body);
    if (!j.is_object()) return error_reply(400, "body must be a JSON object");
    if (!j.contains("prompt") || !j["prompt"].is_string())
      return error_reply(400, "'prompt' must be a string");
    req.prompt = j["prompt"].get<std::string>();
    if (j.contains("max_new_tokens")) {
      if (!j["max_new_tokens"].is_number_integer())
        return error_reply(400, "'max_new_tokens' must be an integer");
      const auto n = j["max_new_tokens"].get<std::int64_t>();
      if (n < 1 || static_cast<std::size_t>(n) > config.max_new_tokens_cap)
        return error_reply(400, "'max_new_tokens' must be in [1, " +
                                    std::to_string(config.max_new_tokens_cap) + "]");
      req.max_new_tokens = static_cast<std::size_t>(n);
    } else {
      req.max_new_tokens = std::min(kDefaultMaxNewTokens, config.max_new_tokens_cap);
    }
  } catch (const nlohmann::json::exception& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  }
  if (req.prompt.empty()) return error_reply(400, "'prompt' must be non-empty");

  auto promise = std::make_shared<std::promise<std::optional<Completion>>>();
  auto future = promise->get_future();
  try {
    cluster.submit(std::move(req), [promise](std::optional<Completion> c) {
      promise->set_value(std::move(c));
    });
  } catch (const PromptTooLong& e) {
    return error_reply(422, e.what());
  } catch (const QueueFull& e) {
    return error_reply(503, e.what());
  } catch (const InvalidConfig& e) {
    return error_reply(400, e.what());
  }
  auto completion = future.get();
  if (!completion) return error_reply(503, "request aborted: server shutting down");
  return {200,
          {{"text", completion->text},
           {"generated_tokens", completion->generated.size()},
           {"prompt_tokens", completion->prompt_tokens},
           {"finish_reason", to_string(completion->finish_reason)}}};
}

HttpServer::HttpServer(Cluster& cluster, HttpConfig config)
    : cluster_(cluster), config_(config), server_(std::make_unique<httplib::Server>()) {
  const std::size_t threads = config_.handler_threads;
  server_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };

  server_->Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
    const HttpReply reply = handle_generate(cluster_, config_, req.body);
    res.status = reply.status;
    res.set_content(dump(reply.body), "application/json");
  });
  server_->Get("/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(dump(cluster_.metrics()), "application/json");
  });
  server_->Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  if (!server_->bind_to_port(host, port)) return -1;
  return port;
}

void HttpServer::serve_forever() { server_->listen_after_bind(); }

void HttpServer::start_background() {
  thread_ = std::thread([this] { serve_forever(); });
  server_->wait_until_ready();
}

void HttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::vector<BenchRow> bench_run(std::shared_ptr<const Model> model, const std::string& model_name,
                                const std::vector<Request>& trace, const BenchOptions& options) {
  const Topology topology = options.topology_path.empty()
                                ? detect_topology()
                                : load_topology_file(options.topology_path);
  const WorkerPlan plan = plan_workers(topology, options.workers, options.threads_per_worker);
  std::size_t vcpu = 0;
  for (const auto& w : plan.workers) vcpu += w.thread_count;

  std::vector<BenchRow> rows;
  for (std::size_t p : options.parallel) {
    ClusterConfig cfg = options.cluster;
    cfg.engine.max_batch = p;
    Cluster cluster(model, plan, cfg);
    BenchRow row;
    row.vcpu = vcpu;
    row.model = model_name;
    row.parallel = p;
    row.run = cluster.run_trace(trace, options.clock);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<BenchRow> bench_run(const BenchOptions& options) {
  auto model = std::make_shared<Model>(load_model(options.model_path));
  model->set_backend(options.backend);
  std::vector<TraceRecord> records;
  if (options.trace_path.empty()) {
    // Keep every default request inside the model's context window.
    TraceSpec spec;
    const std::size_t max_seq = model->config().max_seq_len;
    spec.max_new = std::min(spec.max_new, max_seq / 2);
    spec.min_new = std::min(spec.min_new, spec.max_new);
    spec.max_prompt = std::min(spec.max_prompt, max_seq - spec.max_new);
    spec.min_prompt = std::min(spec.min_prompt, spec.max_prompt);
    records = generate_trace(spec, options.trace_seed);
  } else {
    records = load_trace(options.trace_path);
  }
  const std::string name = std::filesystem::path(options.model_path).stem().string();
  return bench_run(model, name, to_requests(records), options);
}

std::string format_bench_table(const std::vector<BenchRow>& rows) {
  bool sweep = false;
  for (const auto& r : rows) sweep = sweep || r.parallel != rows.front().parallel;
  std::ostringstream out;
  out << "vCPU | Model | Number of requests | Processed Token Throughput (Tokens/Sec) | "
         "Generated Token Throughput (Tokens/Sec) | Execution time(mm:ss)";
  if (sweep) out << " | Parallel requests";
  out << '\n';
  out.setf(std::ios::fixed);
  out.precision(2);
  for (const auto& r : rows) {
    const auto& a = r.run.report.aggregate;
    out << r.vcpu << " | " << r.model << " | " << a.request_count << " | "
        << a.processed_tok_per_s << " | " << a.generated_tok_per_s << " | "
        << format_mm_ss(a.wall_time_s);
    if (sweep) out << " | " << r.parallel;
    out << '\n';
  }
  return out.str();
}

nlohmann::json bench_json(const std::vector<BenchRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = to_json(r.run.report.aggregate);
    j["vcpu"] = r.vcpu;
    j["model"] = r.model;
    j["parallel"] = r.parallel;
    j["preemptions"] = r.run.preemptions;
    j["workers"] = to_json(r.run.report)["workers"];
    out.push_back(std::move(j));
  }
  return rows.size() == 1 ? out.front() : out;
}

}  // namespace tilelm
