#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tilelm/kv_tile_manager.hpp"

namespace tilelm {

// processed = prompt + generated tokens, generated = new tokens only; both
// are credited when a request completes.
struct ThroughputReport {
  std::uint64_t processed_tokens = 0;
  std::uint64_t generated_tokens = 0;
  std::uint64_t request_count = 0;
  double wall_time_s = 0.0;
  double processed_tok_per_s = 0.0;
  double generated_tok_per_s = 0.0;

  static ThroughputReport make(std::uint64_t processed, std::uint64_t generated,
                               std::uint64_t requests, double wall_time_s);
  bool operator==(const ThroughputReport&) const = default;
};

struct ServerReport {
  std::vector<ThroughputReport> workers;
  ThroughputReport aggregate;
};

// Token totals are exact sums; rates divide them by the slowest worker's
// wall time.
ServerReport aggregate(std::span<const ThroughputReport> reports);

// "m:ss" with minutes unbounded, e.g. 0:27, 3:16, 61:05.
std::string format_mm_ss(double seconds);

nlohmann::json to_json(const ThroughputReport& r);
nlohmann::json to_json(const ServerReport& r);
nlohmann::json to_json(const PoolStats& s);

}  // namespace tilelm
