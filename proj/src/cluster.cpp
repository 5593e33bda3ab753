#include "tilelm/cluster.hpp"

#include <algorithm>
#include <iostream>
#include <limits>

#include "tilelm/errors.hpp"

namespace tilelm {

using Clock = std::chrono::steady_clock;

std::size_t pick_worker(std::span<const std::uint64_t> outstanding_tokens) {
  if (outstanding_tokens.empty()) throw InvalidConfig("no workers to dispatch to");
  return static_cast<std::size_t>(
      std::min_element(outstanding_tokens.begin(), outstanding_tokens.end()) -
      outstanding_tokens.begin());
}

namespace {

std::uint64_t request_budget(const Request& r) { return r.prompt.size() + r.max_new_tokens; }

double seconds_since(Clock::time_point epoch) {
  return std::chrono::duration<double>(Clock::now() - epoch).count();
}

}  // namespace

Worker::Worker(std::size_t index, WorkerSlot slot, std::shared_ptr<const Model> model,
               const ClusterConfig& config)
    : index_(index),
      slot_(std::move(slot)),
      engine_(model,
              TilePool(pool_config_for(model->config(), config.tiles_per_worker, config.tile_size,
                                       config.alloc_mode)),
              config.engine) {
  publish();
}

Worker::~Worker() { stop(); }

void Worker::validate(const Request& request) const { engine_.validate(request); }

void Worker::credit(const Completion& c, double at_seconds) {
  processed_ += c.prompt_tokens + c.generated.size();
  generated_ += c.generated.size();
  ++requests_;
  last_completion_s_ = std::max(last_completion_s_, at_seconds);
}

void Worker::publish() {
  auto snap = std::make_shared<WorkerSnapshot>();
  snap->report = ThroughputReport::make(processed_, generated_, requests_, last_completion_s_);
  snap->pool = engine_.pool().stats();
  snap->queued = engine_.queued();
  snap->running = engine_.running();
  snap->preemptions = engine_.total_preemptions();
  snap->pinned = pinned_;
  std::lock_guard lk(snapshot_mu_);
  snapshot_ = std::move(snap);
}

std::shared_ptr<const WorkerSnapshot> Worker::snapshot() const {
  std::lock_guard lk(snapshot_mu_);
  return snapshot_;
}

void Worker::start(Clock::time_point epoch) {
  if (thread_.joinable()) return;
  epoch_ = epoch;
  {
    std::lock_guard lk(inbox_mu_);
    stopping_ = false;
    accepting_ = true;
  }
  thread_ = std::thread([this] { run(); });
}

void Worker::stop() {
  {
    std::lock_guard lk(inbox_mu_);
    stopping_ = true;
    accepting_ = false;
  }
  inbox_cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

void Worker::enqueue(Request request, CompletionCallback done) {
  {
    std::lock_guard lk(inbox_mu_);
    if (accepting_) {
      inbox_.emplace_back(std::move(request), std::move(done));
      done = nullptr;
    }
  }
  if (done) {
    release_outstanding(request_budget(request));
    done(std::nullopt);
    return;
  }
  inbox_cv_.notify_one();
}

void Worker::run() {
  if (!slot_.cores.empty()) pinned_ = pin_current_thread(slot_.cores);
  if (!slot_.cores.empty() && !pinned_)
    std::cerr << "tilelm: worker " << index_ << " could not pin to node " << slot_.node_id
              << " cores; running unpinned\n";
  publish();
  for (;;) {
    std::vector<std::pair<Request, CompletionCallback>> incoming;
    {
      std::unique_lock lk(inbox_mu_);
      inbox_cv_.wait(lk, [&] { return stopping_ || !inbox_.empty() || !engine_.idle(); });
      if (stopping_) {
        incoming.swap(inbox_);
        lk.unlock();
        for (auto& [req, done] : incoming) done(std::nullopt);
        break;
      }
      incoming.swap(inbox_);
    }
    for (auto& [req, done] : incoming) {
      const std::uint64_t budget = request_budget(req);
      try {
        const SeqId id = engine_.submit(std::move(req));
        waiting_.emplace(id, std::make_pair(std::move(done), budget));
      } catch (const Error&) {
        release_outstanding(budget);
        done(std::nullopt);
      }
    }
    if (!engine_.idle()) {
      StepOutcome o = engine_.step();
      const double now = seconds_since(epoch_);
      for (const auto& c : o.completions) credit(c, now);
      // Publish before replying so a client never sees its own request
      // missing from the metrics.
      publish();
      for (auto& c : o.completions) {
        auto node = waiting_.extract(c.id);
        release_outstanding(node.mapped().second);
        node.mapped().first(std::move(c));
      }
      engine_.forget_finished();
    }
    publish();
  }
  for (auto& [id, entry] : waiting_) entry.first(std::nullopt);
  waiting_.clear();
  publish();
}

Cluster::Cluster(std::shared_ptr<const Model> model, WorkerPlan plan, ClusterConfig config)
    : model_(std::move(model)), plan_(std::move(plan)), config_(config), epoch_(Clock::now()) {
  if (!model_) throw InvalidConfig("cluster needs a model");
  if (plan_.workers.empty()) throw InfeasiblePlan("plan has no workers");
  for (std::size_t i = 0; i < plan_.workers.size(); ++i) {
    WorkerSlot slot = plan_.workers[i];
    if (!config_.pin_threads) slot.cores.clear();
    workers_.push_back(std::make_unique<Worker>(i, std::move(slot), model_, config_));
  }
}

Cluster::~Cluster() { stop(); }

void Cluster::start() {
  if (started_) return;
  epoch_ = Clock::now();
  for (auto& w : workers_) w->start(epoch_);
  started_ = true;
}

void Cluster::stop() {
  for (auto& w : workers_) w->stop();
  started_ = false;
}

std::size_t Cluster::dispatch(const Request& request) {
  std::lock_guard lk(dispatch_mu_);
  std::vector<std::uint64_t> load;
  load.reserve(workers_.size());
  for (const auto& w : workers_) load.push_back(w->outstanding_tokens());
  const std::size_t chosen = pick_worker(load);
  workers_[chosen]->add_outstanding(request_budget(request));
  return chosen;
}

std::size_t Cluster::submit(Request request, CompletionCallback done) {
  workers_.front()->validate(request);
  if (outstanding_requests_.fetch_add(1) >= config_.queue_capacity) {
    --outstanding_requests_;
    throw QueueFull("queue full: " + std::to_string(config_.queue_capacity) +
                    " requests outstanding");
  }
  const std::size_t w = dispatch(request);
  workers_[w]->enqueue(std::move(request),
                       [this, done = std::move(done)](std::optional<Completion> c) {
                         --outstanding_requests_;
                         done(std::move(c));
                       });
  return w;
}

ServerReport Cluster::report() const {
  std::vector<ThroughputReport> reports;
  for (const auto& w : workers_) reports.push_back(w->snapshot()->report);
  return aggregate(reports);
}

nlohmann::json Cluster::metrics() const {
  nlohmann::json workers = nlohmann::json::array();
  std::vector<ThroughputReport> reports;
  for (const auto& w : workers_) {
    auto snap = w->snapshot();
    reports.push_back(snap->report);
    workers.push_back({{"worker", w->index()},
                       {"node", w->slot().node_id},
                       {"threads", w->slot().thread_count},
                       {"pinned", snap->pinned},
                       {"report", to_json(snap->report)},
                       {"pool", to_json(snap->pool)},
                       {"queued", snap->queued},
                       {"running", snap->running},
                       {"preemptions", snap->preemptions}});
  }
  return {{"workers", workers},
          {"aggregate", to_json(aggregate(reports).aggregate)},
          {"backend", to_string(model_->backend())},
          {"alloc_mode", to_string(config_.alloc_mode)},
          {"tile_size", config_.tile_size},
          {"tiles_per_worker", config_.tiles_per_worker},
          {"outstanding_requests", outstanding_requests_.load()},
          {"uptime_s", seconds_since(epoch_)}};
}

BenchRun Cluster::run_trace(const std::vector<Request>& trace, ClockMode clock) {
  for (const auto& r : trace) workers_.front()->validate(r);
  return clock == ClockMode::Simulated ? run_simulated(trace) : run_wall(trace);
}

BenchRun Cluster::run_simulated(const std::vector<Request>& trace) {
  if (started_) throw InvalidConfig("simulated replay needs a stopped cluster");
  const std::size_t n = workers_.size();
  std::vector<std::int64_t> clock(n, 0);
  std::vector<std::unordered_map<SeqId, std::size_t>> index_of(n);
  BenchRun run;
  run.completions.resize(trace.size());
  std::size_t next = 0, done = 0;

  while (done < trace.size()) {
    // Earliest busy worker, ties to the lowest index.
    std::optional<std::size_t> busy;
    for (std::size_t w = 0; w < n; ++w)
      if (!workers_[w]->engine().idle() && (!busy || clock[w] < clock[*busy])) busy = w;

    if (next < trace.size() && (!busy || trace[next].arrival_us <= clock[*busy])) {
      const Request& r = trace[next];
      const std::size_t w = dispatch(r);
      Engine& e = workers_[w]->engine();
      if (e.idle()) clock[w] = std::max(clock[w], r.arrival_us);
      index_of[w][e.submit(r)] = next;
      ++next;
      continue;
    }
    if (!busy) break;
    const std::size_t w = *busy;
    Engine& e = workers_[w]->engine();
    StepOutcome o = e.step();
    clock[w] += simulated_step_us(o);
    for (auto& c : o.completions) {
      workers_[w]->credit(c, static_cast<double>(clock[w]) / 1e6);
      workers_[w]->release_outstanding(c.prompt_tokens + e.state(c.id).request.max_new_tokens);
      ++done;
      run.completions[index_of[w].at(c.id)] = std::move(c);
    }
    e.forget_finished();
  }
  for (auto& w : workers_) {
    run.preemptions += w->engine().total_preemptions();
    w->publish();
  }
  run.report = report();
  return run;
}

BenchRun Cluster::run_wall(const std::vector<Request>& trace) {
  BenchRun run;
  run.completions.resize(trace.size());
  std::mutex mu;
  std::condition_variable cv;
  std::size_t done = 0;
  start();
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::this_thread::sleep_until(epoch_ + std::chrono::microseconds(trace[i].arrival_us));
    submit(trace[i], [&, i](std::optional<Completion> c) {
      std::lock_guard lk(mu);
      if (c) run.completions[i] = std::move(*c);
      ++done;
      cv.notify_all();
    });
  }
  {
    std::unique_lock lk(mu);
    cv.wait(lk, [&] { return done == trace.size(); });
  }
  stop();
  for (auto& w : workers_) run.preemptions += w->snapshot()->preemptions;
  run.report = report();
  return run;
}

}  // namespace tilelm
