#pragma once

#include <cstddef>
#include <vector>

#include "tilelm/kv_tile_manager.hpp"
#include "tilelm/trace.hpp"

namespace tilelm {

struct AllocSimRequest {
  std::size_t prompt_len = 1;
  std::size_t max_new_tokens = 1;
  std::size_t gen_tokens = 1;  // actual generation length, <= max_new_tokens
};

struct AllocSimResult {
  AllocMode mode = AllocMode::Tiled;
  std::size_t requests = 0;
  std::size_t first_step_admissions = 0;
  std::size_t peak_concurrent = 0;
  double mean_concurrent = 0.0;
  std::size_t steps = 0;
  std::size_t preemptions = 0;
  std::size_t peak_waste_slots = 0;
  double mean_waste_slots = 0.0;
};

// Model-free replay of the admission loop against a tile pool: all requests
// queued at step 0, FIFO admission, one KV slot per live sequence per step,
// evict-youngest on exhaustion. Tiled mode grows on demand; contiguous mode
// reserves prompt + max_new_tokens up front.
AllocSimResult simulate_allocation(const std::vector<AllocSimRequest>& requests,
                                   std::size_t total_tiles, std::size_t tile_size, AllocMode mode,
                                   std::size_t decode_reserve = 1);

// gen_tokens falls back to max_new_tokens when the trace omits it.
std::vector<AllocSimRequest> alloc_requests_from_trace(const std::vector<TraceRecord>& trace);

}  // namespace tilelm
