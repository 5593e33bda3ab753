#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "tilelm/alloc_compare.hpp"
#include "tilelm/errors.hpp"
#include "tilelm/serving.hpp"
#include "tilelm/trace.hpp"

using namespace tilelm;

namespace {

volatile std::sig_atomic_t g_stop = 0;
extern "C" void on_signal(int) { g_stop = 1; }

struct ServeArgs {
  std::string model, host = "127.0.0.1", topology, backend = "blocked";
  int port = 8080;
  std::size_t tiles = 1024, tile_size = 16, max_batch = 64, cap = 1024, http_threads = 64;
  std::optional<std::size_t> workers, threads;
  bool no_pin = false;
};

struct BenchArgs {
  std::string model, trace, clock = "simulated", format = "table", topology,
      backend = "blocked", alloc = "tiled";
  std::vector<std::size_t> parallel{64};
  std::uint64_t trace_seed = 1;
  std::size_t tiles = 1024, tile_size = 16;
  std::optional<std::size_t> workers, threads;
  bool ignore_eos = false, no_pin = false;
};

struct GenModelArgs {
  std::string preset = "tiny", out;
  std::uint64_t seed = 7;
};

struct CompareArgs {
  std::string trace, format = "table";
  std::uint64_t seed = 1;
  std::size_t tiles = 512, tile_size = 16, reserve = 1;
};

struct GenTraceArgs {
  std::string out, kind = "default";
  std::uint64_t seed = 1;
  std::optional<std::size_t> count;
  std::int64_t spacing_ms = 0;
};

AllocMode parse_alloc_mode(const std::string& s) {
  if (s == "tiled") return AllocMode::Tiled;
  if (s == "contiguous") return AllocMode::ContiguousReservation;
  throw InvalidConfig("unknown allocation mode '" + s + "'");
}

Topology load_or_detect(const std::string& path) {
  return path.empty() ? detect_topology() : load_topology_file(path);
}

int run_serve(const ServeArgs& a) {
  auto model = std::make_shared<Model>(load_model(a.model));
  model->set_backend(parse_backend(a.backend));
  const Topology topo = load_or_detect(a.topology);
  const WorkerPlan plan = plan_workers(topo, a.workers, a.threads);

  ClusterConfig cfg;
  cfg.tiles_per_worker = a.tiles;
  cfg.tile_size = a.tile_size;
  cfg.engine.max_batch = a.max_batch;
  cfg.pin_threads = !a.no_pin;
  Cluster cluster(model, plan, cfg);

  HttpConfig http;
  http.max_new_tokens_cap = a.cap;
  http.handler_threads = a.http_threads;
  HttpServer server(cluster, http);
  const int port = server.bind(a.host, a.port);
  if (port <= 0) throw Error("cannot bind " + a.host + ":" + std::to_string(a.port));

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  cluster.start();
  server.start_background();
  std::cout << "tilelm: " << plan.workers.size() << " worker(s), topology "
            << to_string(topo.source) << ", backend " << to_string(model->backend()) << "\n"
            << "listening on http://" << a.host << ":" << port << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  cluster.stop();
  std::cout << "tilelm: stopped" << std::endl;
  return 0;
}

int run_bench(const BenchArgs& a) {
  BenchOptions opt;
  opt.model_path = a.model;
  opt.trace_path = a.trace;
  opt.trace_seed = a.trace_seed;
  opt.clock = parse_clock(a.clock);
  opt.parallel = a.parallel;
  opt.workers = a.workers;
  opt.threads_per_worker = a.threads;
  opt.topology_path = a.topology;
  opt.backend = parse_backend(a.backend);
  opt.cluster.tiles_per_worker = a.tiles;
  opt.cluster.tile_size = a.tile_size;
  opt.cluster.alloc_mode = parse_alloc_mode(a.alloc);
  opt.cluster.engine.ignore_eos = a.ignore_eos;
  opt.cluster.pin_threads = !a.no_pin;
  const auto rows = bench_run(opt);
  if (a.format == "json")
    std::cout << bench_json(rows).dump(2) << "\n";
  else
    std::cout << format_bench_table(rows);
  return 0;
}

int run_gen_model(const GenModelArgs& a) {
  const Model m = gen_random_model(parse_preset(a.preset), a.seed);
  save_model(m, a.out);
  std::cout << "wrote " << a.out << " (" << a.preset << ", seed " << a.seed << ", "
            << m.parameter_count() << " parameters)\n";
  return 0;
}

int run_compare_alloc(const CompareArgs& a) {
  const auto records =
      a.trace.empty() ? generate_trace(skewed_alloc_trace_spec(), a.seed) : load_trace(a.trace);
  const auto reqs = alloc_requests_from_trace(records);
  const auto tiled = simulate_allocation(reqs, a.tiles, a.tile_size, AllocMode::Tiled, a.reserve);
  const auto contiguous = simulate_allocation(reqs, a.tiles, a.tile_size,
                                              AllocMode::ContiguousReservation, a.reserve);
  const double ratio = contiguous.peak_concurrent
                           ? static_cast<double>(tiled.peak_concurrent) /
                                 static_cast<double>(contiguous.peak_concurrent)
                           : 0.0;
  if (a.format == "json") {
    auto row = [](const AllocSimResult& r) {
      return nlohmann::json{{"mode", to_string(r.mode)},
                            {"requests", r.requests},
                            {"first_step_admissions", r.first_step_admissions},
                            {"peak_concurrent", r.peak_concurrent},
                            {"mean_concurrent", r.mean_concurrent},
                            {"steps", r.steps},
                            {"preemptions", r.preemptions},
                            {"peak_waste_slots", r.peak_waste_slots},
                            {"mean_waste_slots", r.mean_waste_slots}};
    };
    std::cout << nlohmann::json{{"tiles", a.tiles},
                                {"tile_size", a.tile_size},
                                {"tiled", row(tiled)},
                                {"contiguous", row(contiguous)},
                                {"peak_concurrent_ratio", ratio}}
                     .dump(2)
              << "\n";
    return 0;
  }
  std::printf("%zu requests, %zu tiles x %zu slots\n", reqs.size(), a.tiles, a.tile_size);
  std::printf("Mode | First-step admissions | Peak concurrent | Mean concurrent | Steps | "
              "Preemptions | Peak waste slots | Mean waste slots\n");
  for (const auto* r : {&tiled, &contiguous})
    std::printf("%s | %zu | %zu | %.2f | %zu | %zu | %zu | %.1f\n", to_string(r->mode),
                r->first_step_admissions, r->peak_concurrent, r->mean_concurrent, r->steps,
                r->preemptions, r->peak_waste_slots, r->mean_waste_slots);
  std::printf("peak concurrency ratio (tiled / contiguous): %.2f\n", ratio);
  return 0;
}

int run_gen_trace(const GenTraceArgs& a) {
  TraceSpec spec = a.kind == "skewed" ? skewed_alloc_trace_spec() : TraceSpec{};
  if (a.kind != "skewed" && a.kind != "default")
    throw InvalidConfig("unknown trace kind '" + a.kind + "'");
  if (a.count) spec.count = *a.count;
  spec.arrival_spacing_ms = a.spacing_ms;
  const auto trace = generate_trace(spec, a.seed);
  if (a.out.empty() || a.out == "-")
    write_trace(std::cout, trace);
  else
    save_trace(a.out, trace);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiled-KV CPU inference engine: serve, benchmark, and allocator comparison"};
  app.require_subcommand(1);

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "Run the HTTP generation server");
  s->add_option("--model", serve.model, "Weight file")->required()->check(CLI::ExistingFile);
  s->add_option("--host", serve.host, "Bind address")->capture_default_str();
  s->add_option("--port", serve.port, "Port (0 picks a free one)")->capture_default_str();
  s->add_option("--tiles", serve.tiles, "KV tiles per worker")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--tile-size", serve.tile_size, "Token slots per tile")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--workers", serve.workers, "Worker count (default: one per NUMA node)");
  s->add_option("--threads-per-worker", serve.threads, "Threads per worker (default: cores - 1)");
  s->add_option("--topology", serve.topology, "Topology JSON file (default: detect)");
  s->add_option("--backend", serve.backend, "GEMM backend")->capture_default_str()
      ->check(CLI::IsMember(backend_names()));
  s->add_option("--max-batch", serve.max_batch, "Max sequences per worker batch")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--max-new-tokens-cap", serve.cap, "Largest accepted max_new_tokens")->capture_default_str();
  s->add_option("--http-threads", serve.http_threads, "HTTP handler threads")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_flag("--no-pin", serve.no_pin, "Do not pin worker threads");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Replay a request trace and report throughput");
  b->add_option("--model", bench.model, "Weight file")->required()->check(CLI::ExistingFile);
  b->add_option("--trace", bench.trace, "JSONL trace (default: seeded 100-request trace)")->check(CLI::ExistingFile);
  b->add_option("--trace-seed", bench.trace_seed, "Seed for the default trace")->capture_default_str();
  b->add_option("--parallel", bench.parallel, "Parallel requests per worker, comma separated")
      ->delimiter(',')->capture_default_str()->check(CLI::PositiveNumber);
  b->add_option("--clock", bench.clock, "simulated or wall")->capture_default_str()
      ->check(CLI::IsMember({"simulated", "wall"}));
  b->add_option("--format", bench.format, "table or json")->capture_default_str()
      ->check(CLI::IsMember({"table", "json"}));
  b->add_option("--workers", bench.workers, "Worker count (default: one per NUMA node)");
  b->add_option("--threads-per-worker", bench.threads, "Threads per worker (default: cores - 1)");
  b->add_option("--topology", bench.topology, "Topology JSON file (default: detect)");
  b->add_option("--tiles", bench.tiles, "KV tiles per worker")->capture_default_str()->check(CLI::PositiveNumber);
  b->add_option("--tile-size", bench.tile_size, "Token slots per tile")->capture_default_str()->check(CLI::PositiveNumber);
  b->add_option("--backend", bench.backend, "GEMM backend")->capture_default_str()
      ->check(CLI::IsMember(backend_names()));
  b->add_option("--alloc-mode", bench.alloc, "tiled or contiguous")->capture_default_str()
      ->check(CLI::IsMember({"tiled", "contiguous"}));
  b->add_flag("--ignore-eos", bench.ignore_eos, "Always generate max_new_tokens");
  b->add_flag("--no-pin", bench.no_pin, "Do not pin worker threads");

  GenModelArgs gm;
  auto* g = app.add_subcommand("gen-model", "Write a seeded random model");
  g->add_option("--preset", gm.preset, "tiny or small")->capture_default_str()
      ->check(CLI::IsMember({"tiny", "small"}));
  g->add_option("--seed", gm.seed, "RNG seed")->capture_default_str();
  g->add_option("--out", gm.out, "Output path")->required();

  CompareArgs ca;
  auto* c = app.add_subcommand("compare-alloc", "Tiled vs contiguous-reservation admission");
  c->add_option("--trace", ca.trace, "JSONL trace; gen_tokens gives actual lengths")->check(CLI::ExistingFile);
  c->add_option("--seed", ca.seed, "Seed for the built-in skewed trace")->capture_default_str();
  c->add_option("--tiles", ca.tiles, "Tiles in the pool")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--tile-size", ca.tile_size, "Token slots per tile")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--decode-reserve", ca.reserve, "Headroom tiles at admission")->capture_default_str();
  c->add_option("--format", ca.format, "table or json")->capture_default_str()
      ->check(CLI::IsMember({"table", "json"}));

  GenTraceArgs gt;
  auto* t = app.add_subcommand("gen-trace", "Write a seeded JSONL trace");
  t->add_option("--kind", gt.kind, "default or skewed")->capture_default_str();
  t->add_option("--seed", gt.seed, "RNG seed")->capture_default_str();
  t->add_option("--count", gt.count, "Number of requests");
  t->add_option("--spacing-ms", gt.spacing_ms, "Gap between arrivals")->capture_default_str();
  t->add_option("--out", gt.out, "Output path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*s) return run_serve(serve);
    if (*b) return run_bench(bench);
    if (*g) return run_gen_model(gm);
    if (*c) return run_compare_alloc(ca);
    if (*t) return run_gen_trace(gt);
  } catch (const std::exception& e) {
    std::cerr << "tilelm: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
