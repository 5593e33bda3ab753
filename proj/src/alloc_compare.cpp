#include "tilelm/alloc_compare.hpp"

#include <algorithm>
#include <deque>

#include "tilelm/errors.hpp"

namespace tilelm {

namespace {

struct SimSeq {
  std::size_t generated = 0;
  std::uint64_t admit_order = 0;
  bool running = false;
  bool done = false;
};

}  // namespace

AllocSimResult simulate_allocation(const std::vector<AllocSimRequest>& requests,
                                   std::size_t total_tiles, std::size_t tile_size, AllocMode mode,
                                   std::size_t decode_reserve) {
  TilePoolConfig pc;
  pc.total_tiles = total_tiles;
  pc.tile_size = tile_size;
  pc.mode = mode;
  TilePool pool(pc);

  for (const auto& r : requests) {
    if (r.prompt_len < 1 || r.gen_tokens < 1 || r.gen_tokens > r.max_new_tokens)
      throw InvalidConfig("allocation request needs prompt >= 1 and 1 <= gen <= max_new");
    if (tiles_needed(r.prompt_len + r.max_new_tokens, tile_size) > total_tiles)
      throw InvalidConfig("request footprint exceeds the pool");
  }

  AllocSimResult res;
  res.mode = mode;
  res.requests = requests.size();
  std::vector<SimSeq> seqs(requests.size());
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < requests.size(); ++i) queue.push_back(i);
  std::vector<std::size_t> running;
  std::uint64_t admit_counter = 0;
  std::size_t completed = 0;
  double concurrency_sum = 0.0, waste_sum = 0.0;

  auto finish = [&](std::size_t i) {
    pool.free_sequence(i);
    seqs[i].running = false;
    seqs[i].done = true;
    std::erase(running, i);
    ++completed;
  };
  auto evict_youngest = [&]() {
    const auto victim = *std::max_element(running.begin(), running.end(), [&](auto a, auto b) {
      return seqs[a].admit_order < seqs[b].admit_order;
    });
    pool.free_sequence(victim);
    seqs[victim].running = false;
    std::erase(running, victim);
    queue.push_front(victim);
    ++res.preemptions;
    return victim;
  };

  while (completed < requests.size()) {
    ++res.steps;
    const std::vector<std::size_t> decoding = running;

    std::size_t admitted = 0;
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      const auto& r = requests[i];
      const std::size_t context = r.prompt_len + seqs[i].generated;
      const std::size_t remaining = r.max_new_tokens - seqs[i].generated;
      const std::size_t reserve = running.empty() ? 0 : decode_reserve;
      if (!pool.can_admit(context, reserve, remaining)) break;
      pool.allocate_sequence(i, context, remaining);
      for (std::size_t t = 0; t < context; ++t) pool.append_slot(i);
      queue.pop_front();
      seqs[i].running = true;
      seqs[i].admit_order = ++admit_counter;
      running.push_back(i);
      ++admitted;
    }
    if (res.steps == 1) res.first_step_admissions = admitted;
    if (running.empty() && !queue.empty())
      throw InvalidConfig("allocation simulation cannot admit the queue head");

    res.peak_concurrent = std::max(res.peak_concurrent, running.size());
    concurrency_sum += static_cast<double>(running.size());
    const auto stats = pool.stats();
    res.peak_waste_slots = std::max(res.peak_waste_slots, stats.internal_waste_slots);
    waste_sum += static_cast<double>(stats.internal_waste_slots);

    // Newly admitted sequences emit their first token from the prefill.
    for (std::size_t i : std::vector<std::size_t>(running.end() - static_cast<std::ptrdiff_t>(admitted),
                                                  running.end())) {
      if (++seqs[i].generated >= requests[i].gen_tokens) finish(i);
    }
    for (std::size_t i : decoding) {
      if (!seqs[i].running) continue;
      for (;;) {
        try {
          pool.append_slot(i);
          break;
        } catch (const OutOfTiles&) {
          if (evict_youngest() == i) break;
        }
      }
      if (!seqs[i].running) continue;
      if (++seqs[i].generated >= requests[i].gen_tokens) finish(i);
    }
  }
  res.mean_concurrent = concurrency_sum / static_cast<double>(res.steps);
  res.mean_waste_slots = waste_sum / static_cast<double>(res.steps);
  return res;
}

std::vector<AllocSimRequest> alloc_requests_from_trace(const std::vector<TraceRecord>& trace) {
  std::vector<AllocSimRequest> out;
  out.reserve(trace.size());
  for (const auto& r : trace)
    out.push_back({r.prompt.size(), r.max_new_tokens, r.gen_tokens.value_or(r.max_new_tokens)});
  return out;
}

}  // namespace tilelm
