#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tilelm/kv_tile_manager.hpp"
#include "tilelm/metrics.hpp"
#include "tilelm/model.hpp"

namespace tilelm {

struct Request {
  std::string prompt;
  std::size_t max_new_tokens = 1;
  std::int64_t arrival_us = 0;  // relative to run start
};

enum class Phase { Queued, Prefill, Decoding, Finished, Preempted };
enum class FinishReason { Eos, MaxTokens };

const char* to_string(Phase phase);
const char* to_string(FinishReason reason);

struct SequenceState {
  SeqId id = 0;
  Request request;
  std::size_t prompt_len = 0;    // original prompt tokens
  std::vector<TokenId> tokens;   // prompt followed by everything generated
  Phase phase = Phase::Queued;
  std::size_t generated_count = 0;
  std::optional<FinishReason> finish_reason;
  std::uint64_t admit_order = 0;  // larger = admitted more recently
  std::size_t preemptions = 0;

  std::size_t remaining_budget() const { return request.max_new_tokens - generated_count; }
};

struct Completion {
  SeqId id = 0;
  std::string text;
  std::vector<TokenId> generated;
  std::size_t prompt_tokens = 0;
  FinishReason finish_reason = FinishReason::MaxTokens;
  std::size_t preemptions = 0;
};

struct StepOutcome {
  std::size_t admitted = 0;
  std::size_t tokens_generated = 0;
  std::size_t prefill_tokens = 0;  // includes recompute after preemption
  std::size_t decode_tokens = 0;
  std::vector<SeqId> completed;
  std::vector<SeqId> preempted;
  std::vector<Completion> completions;

  bool idle() const {
    return admitted == 0 && tokens_generated == 0 && completed.empty() && preempted.empty();
  }
};

enum class PreemptionPolicy { EvictYoungest };

struct EngineConfig {
  std::size_t max_batch = 64;
  std::size_t decode_reserve_tiles = 1;
  PreemptionPolicy preemption_policy = PreemptionPolicy::EvictYoungest;
  bool ignore_eos = false;  // benchmark switch: always run to max_new_tokens
};

// Continuous-batching loop over one tile pool. Single-lane: every method must
// be called from the owning worker's thread.
class Engine {
 public:
  Engine(std::shared_ptr<const Model> model, TilePool pool, EngineConfig config = {});

  // Returns the engine-assigned id. Throws PromptTooLong when the prompt plus
  // its token budget cannot fit the context window or the whole pool, and
  // InvalidConfig for an empty prompt or zero budget.
  SeqId submit(Request request);
  // The admission checks of submit() alone; touches no mutable state.
  void validate(const Request& request) const;

  StepOutcome step();

  // Frees the victim's tiles and re-queues it at the front; on re-admission
  // its KV is recomputed from the prompt plus everything generated so far.
  void preempt(SeqId victim);

  bool idle() const { return queue_.empty() && running_.empty(); }
  std::size_t queued() const { return queue_.size(); }
  std::size_t running() const { return running_.size(); }
  const std::deque<SeqId>& queue() const { return queue_; }
  const std::vector<SeqId>& running_ids() const { return running_; }
  const SequenceState& state(SeqId id) const;
  const TilePool& pool() const { return pool_; }
  const Model& model() const { return *model_; }
  const EngineConfig& config() const { return config_; }
  std::uint64_t total_preemptions() const { return total_preemptions_; }

  // Drops bookkeeping for finished sequences.
  void forget_finished();

 private:
  SequenceState& mutable_state(SeqId id);
  void record_token(SequenceState& s, TokenId token, StepOutcome& out);
  void finish(SequenceState& s, FinishReason reason, StepOutcome& out);
  void admit_and_prefill(StepOutcome& out);
  void decode_running(const std::vector<SeqId>& decoding, StepOutcome& out);
  SeqId pick_victim() const;

  std::shared_ptr<const Model> model_;
  TilePool pool_;
  EngineConfig config_;
  std::map<SeqId, SequenceState> states_;
  std::deque<SeqId> queue_;
  std::vector<SeqId> running_;  // admission order, oldest first
  SeqId next_id_ = 0;
  std::uint64_t admit_counter_ = 0;
  std::uint64_t total_preemptions_ = 0;
};

enum class ClockMode { Simulated, Wall };
ClockMode parse_clock(std::string_view name);

// Deterministic step duration used by the simulated clock.
std::int64_t simulated_step_us(const StepOutcome& outcome);

struct TraceRun {
  ThroughputReport report;
  std::vector<Completion> completions;  // indexed like the input trace
};

// Releases each request at its arrival time and steps until all finish.
TraceRun run_trace(Engine& engine, const std::vector<Request>& trace, ClockMode clock);

}  // namespace tilelm
