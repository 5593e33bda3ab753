#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tilelm/scheduler.hpp"

namespace tilelm {

// One JSONL line: {"arrival_ms": int, "prompt": str, "max_new_tokens": int}.
// gen_tokens is an optional extension read only by the allocator comparison:
// the generation length the request actually reaches.
struct TraceRecord {
  std::int64_t arrival_ms = 0;
  std::string prompt;
  std::size_t max_new_tokens = 1;
  std::optional<std::size_t> gen_tokens;
};

// Throws MalformedTrace with the 1-based line number. Records must be sorted
// by arrival_ms.
std::vector<TraceRecord> parse_trace(std::istream& in);
std::vector<TraceRecord> load_trace(const std::filesystem::path& path);
void write_trace(std::ostream& out, const std::vector<TraceRecord>& trace);
void save_trace(const std::filesystem::path& path, const std::vector<TraceRecord>& trace);

std::vector<Request> to_requests(const std::vector<TraceRecord>& trace);

struct TraceSpec {
  std::size_t count = 100;
  std::size_t min_prompt = 64;
  std::size_t max_prompt = 512;
  std::size_t min_new = 32;
  std::size_t max_new = 128;
  // Fractions of max_new_tokens drawn for gen_tokens; unset leaves it empty.
  std::optional<std::pair<double, double>> gen_fraction;
  std::int64_t arrival_spacing_ms = 0;  // 0: everything arrives at once
};

// Seeded printable-ASCII workload. A default TraceSpec gives the stand-in
// 100-request benchmark load.
std::vector<TraceRecord> generate_trace(const TraceSpec& spec, std::uint64_t seed);

// Short prompts, long budgets, generations averaging 25% of the budget.
TraceSpec skewed_alloc_trace_spec();

}  // namespace tilelm
