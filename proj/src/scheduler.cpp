#include "tilelm/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <thread>
#include <unordered_map>

#include "tilelm/errors.hpp"

namespace tilelm {

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Queued: return "queued";
    case Phase::Prefill: return "prefill";
    case Phase::Decoding: return "decoding";
    case Phase::Finished: return "finished";
    case Phase::Preempted: return "preempted";
  }
  return "?";
}

const char* to_string(FinishReason reason) {
  return reason == FinishReason::Eos ? "eos" : "max_tokens";
}

Engine::Engine(std::shared_ptr<const Model> model, TilePool pool, EngineConfig config)
    : model_(std::move(model)), pool_(std::move(pool)), config_(config) {
  if (!model_) throw InvalidConfig("engine needs a model");
  if (config_.max_batch < 1) throw InvalidConfig("max_batch must be >= 1");
  const auto& mc = model_->config();
  const auto& pc = pool_.config();
  if (pc.n_layers != mc.n_layers || pc.n_kv_heads != mc.n_heads || pc.head_dim != mc.head_dim)
    throw InvalidConfig("tile pool geometry does not match the model");
}

void Engine::validate(const Request& request) const {
  if (request.prompt.empty()) throw InvalidConfig("prompt must be non-empty");
  if (request.max_new_tokens < 1) throw InvalidConfig("max_new_tokens must be >= 1");
  const std::size_t max_seq = model_->config().max_seq_len;
  const std::size_t plen = request.prompt.size();
  if (request.max_new_tokens > max_seq || plen > max_seq - request.max_new_tokens)
    throw PromptTooLong("prompt of " + std::to_string(plen) + " tokens with max_new_tokens " +
                        std::to_string(request.max_new_tokens) + " exceeds max_seq_len " +
                        std::to_string(max_seq));
  if (tiles_needed(plen + request.max_new_tokens, pool_.tile_size()) > pool_.config().total_tiles)
    throw PromptTooLong("request footprint exceeds the tile pool");
}

SeqId Engine::submit(Request request) {
  validate(request);
  SequenceState s;
  s.id = next_id_++;
  s.tokens = encode(request.prompt);
  s.prompt_len = s.tokens.size();
  s.request = std::move(request);
  const SeqId id = s.id;
  const std::int64_t arrival = s.request.arrival_us;

  // FIFO by (arrival, id) behind anything already queued at or before it.
  auto pos = queue_.end();
  while (pos != queue_.begin()) {
    const auto& prev = states_.at(*std::prev(pos));
    if (prev.phase == Phase::Preempted || prev.request.arrival_us <= arrival) break;
    --pos;
  }
  queue_.insert(pos, id);
  states_.emplace(id, std::move(s));
  return id;
}

const SequenceState& Engine::state(SeqId id) const {
  auto it = states_.find(id);
  if (it == states_.end()) throw UnknownSequence("unknown request " + std::to_string(id));
  return it->second;
}

SequenceState& Engine::mutable_state(SeqId id) {
  auto it = states_.find(id);
  if (it == states_.end()) throw UnknownSequence("unknown request " + std::to_string(id));
  return it->second;
}

void Engine::forget_finished() {
  std::erase_if(states_, [](const auto& kv) { return kv.second.phase == Phase::Finished; });
}

void Engine::finish(SequenceState& s, FinishReason reason, StepOutcome& out) {
  s.phase = Phase::Finished;
  s.finish_reason = reason;
  pool_.free_sequence(s.id);
  std::erase(running_, s.id);
  Completion c;
  c.id = s.id;
  c.generated.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(s.prompt_len), s.tokens.end());
  c.text = decode(c.generated);
  c.prompt_tokens = s.prompt_len;
  c.finish_reason = reason;
  c.preemptions = s.preemptions;
  out.completed.push_back(s.id);
  out.completions.push_back(std::move(c));
}

void Engine::record_token(SequenceState& s, TokenId token, StepOutcome& out) {
  s.tokens.push_back(token);
  ++s.generated_count;
  ++out.tokens_generated;
  if (!config_.ignore_eos && token == model_->config().eos_token)
    finish(s, FinishReason::Eos, out);
  else if (s.generated_count >= s.request.max_new_tokens)
    finish(s, FinishReason::MaxTokens, out);
}

void Engine::preempt(SeqId victim) {
  SequenceState& s = mutable_state(victim);
  if (s.phase != Phase::Decoding)
    throw InvalidConfig("only decoding sequences can be preempted");
  pool_.free_sequence(victim);
  std::erase(running_, victim);
  s.phase = Phase::Preempted;
  ++s.preemptions;
  ++total_preemptions_;
  queue_.push_front(victim);
}

SeqId Engine::pick_victim() const {
  SeqId victim = running_.front();
  std::uint64_t youngest = 0;
  for (SeqId id : running_) {
    const auto& s = states_.at(id);
    if (s.phase == Phase::Decoding && s.admit_order >= youngest) {
      youngest = s.admit_order;
      victim = id;
    }
  }
  return victim;
}

void Engine::admit_and_prefill(StepOutcome& out) {
  std::vector<SeqId> admitted;
  while (!queue_.empty() && running_.size() < config_.max_batch) {
    SequenceState& s = mutable_state(queue_.front());
    // Headroom only matters when something else competes for the tiles.
    const std::size_t reserve = running_.empty() ? 0 : config_.decode_reserve_tiles;
    if (!pool_.can_admit(s.tokens.size(), reserve, s.remaining_budget())) break;
    pool_.allocate_sequence(s.id, s.tokens.size(), s.remaining_budget());
    queue_.pop_front();
    s.phase = Phase::Prefill;
    s.admit_order = ++admit_counter_;
    running_.push_back(s.id);
    admitted.push_back(s.id);
  }
  out.admitted = admitted.size();
  if (admitted.empty()) return;

  std::vector<PrefillItem> batch;
  batch.reserve(admitted.size());
  for (SeqId id : admitted) {
    const auto& s = states_.at(id);
    batch.push_back({id, s.tokens});
    out.prefill_tokens += s.tokens.size();
  }
  auto logits = prefill(*model_, batch, pool_);
  for (std::size_t i = 0; i < admitted.size(); ++i) {
    SequenceState& s = mutable_state(admitted[i]);
    s.phase = Phase::Decoding;
    record_token(s, greedy_sample(logits[i]), out);
  }
}

void Engine::decode_running(const std::vector<SeqId>& decoding, StepOutcome& out) {
  if (decoding.empty()) return;
  std::map<SeqId, std::vector<float>> ready;
  std::vector<SeqId> pending = decoding;
  while (!pending.empty()) {
    std::vector<DecodeItem> items;
    items.reserve(pending.size());
    for (SeqId id : pending) items.push_back({id, states_.at(id).tokens.back()});
    auto results = decode_step(*model_, items, pool_);
    std::vector<SeqId> failed;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (results[i].status == DecodeStatus::Ok) {
        ready[pending[i]] = std::move(results[i].logits);
      } else if (results[i].status == DecodeStatus::ContextFull) {
        finish(mutable_state(pending[i]), FinishReason::MaxTokens, out);
      } else {
        failed.push_back(pending[i]);
      }
    }
    // Evict youngest until every failed sequence either fits or was evicted.
    if (!failed.empty()) {
      const SeqId victim = pick_victim();
      preempt(victim);
      out.preempted.push_back(victim);
      ready.erase(victim);
      std::erase(failed, victim);
    }
    pending = std::move(failed);
  }
  for (auto& [id, logits] : ready) {
    ++out.decode_tokens;
    record_token(mutable_state(id), greedy_sample(logits), out);
  }
}

StepOutcome Engine::step() {
  StepOutcome out;
  std::vector<SeqId> decoding;
  for (SeqId id : running_)
    if (states_.at(id).phase == Phase::Decoding) decoding.push_back(id);
  admit_and_prefill(out);
  decode_running(decoding, out);
  return out;
}

ClockMode parse_clock(std::string_view name) {
  if (name == "simulated") return ClockMode::Simulated;
  if (name == "wall") return ClockMode::Wall;
  throw InvalidConfig("unknown clock mode '" + std::string(name) + "'");
}

std::int64_t simulated_step_us(const StepOutcome& o) {
  constexpr std::int64_t kStepOverheadUs = 500;
  constexpr std::int64_t kPrefillTokenUs = 20;
  constexpr std::int64_t kDecodeTokenUs = 100;
  return kStepOverheadUs + kPrefillTokenUs * static_cast<std::int64_t>(o.prefill_tokens) +
         kDecodeTokenUs * static_cast<std::int64_t>(o.decode_tokens);
}

TraceRun run_trace(Engine& engine, const std::vector<Request>& trace, ClockMode clock) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  std::int64_t sim_now = 0;
  auto now_us = [&]() -> std::int64_t {
    if (clock == ClockMode::Simulated) return sim_now;
    return std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - start).count();
  };

  TraceRun run;
  run.completions.resize(trace.size());
  std::unordered_map<SeqId, std::size_t> index_of;
  std::size_t next = 0, done = 0;
  std::uint64_t processed = 0, generated = 0;
  std::int64_t last_completion = 0;

  while (done < trace.size()) {
    const std::int64_t now = now_us();
    while (next < trace.size() && trace[next].arrival_us <= now) {
      index_of[engine.submit(trace[next])] = next;
      ++next;
    }
    if (engine.idle()) {
      if (next >= trace.size()) break;
      if (clock == ClockMode::Simulated)
        sim_now = trace[next].arrival_us;
      else
        std::this_thread::sleep_until(start + std::chrono::microseconds(trace[next].arrival_us));
      continue;
    }
    StepOutcome o = engine.step();
    if (clock == ClockMode::Simulated) sim_now += simulated_step_us(o);
    for (auto& c : o.completions) {
      processed += c.prompt_tokens + c.generated.size();
      generated += c.generated.size();
      ++done;
      run.completions[index_of.at(c.id)] = std::move(c);
    }
    if (!o.completions.empty()) last_completion = now_us();
    engine.forget_finished();
  }
  run.report = ThroughputReport::make(processed, generated, done,
                                      static_cast<double>(last_completion) / 1e6);
  return run;
}

}  // namespace tilelm
