#include "tilelm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tilelm/errors.hpp"

namespace tilelm {

ThroughputReport ThroughputReport::make(std::uint64_t processed, std::uint64_t generated,
                                        std::uint64_t requests, double wall_time_s) {
  ThroughputReport r;
  r.processed_tokens = processed;
  r.generated_tokens = generated;
  r.request_count = requests;
  r.wall_time_s = wall_time_s;
  if (wall_time_s > 0.0) {
    r.processed_tok_per_s = static_cast<double>(processed) / wall_time_s;
    r.generated_tok_per_s = static_cast<double>(generated) / wall_time_s;
  }
  return r;
}

ServerReport aggregate(std::span<const ThroughputReport> reports) {
  if (reports.empty()) throw InvalidConfig("aggregate needs at least one worker report");
  ServerReport out;
  out.workers.assign(reports.begin(), reports.end());
  std::uint64_t processed = 0, generated = 0, requests = 0;
  double wall = 0.0;
  for (const auto& r : reports) {
    processed += r.processed_tokens;
    generated += r.generated_tokens;
    requests += r.request_count;
    wall = std::max(wall, r.wall_time_s);
  }
  out.aggregate = ThroughputReport::make(processed, generated, requests, wall);
  return out;
}

std::string format_mm_ss(double seconds) {
  const auto total = static_cast<long long>(std::llround(std::max(0.0, seconds)));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%lld:%02lld", total / 60, total % 60);
  return buf;
}

nlohmann::json to_json(const ThroughputReport& r) {
  return {{"processed_tokens", r.processed_tokens},
          {"generated_tokens", r.generated_tokens},
          {"request_count", r.request_count},
          {"wall_time_s", r.wall_time_s},
          {"processed_tok_per_s", r.processed_tok_per_s},
          {"generated_tok_per_s", r.generated_tok_per_s}};
}

nlohmann::json to_json(const ServerReport& r) {
  nlohmann::json workers = nlohmann::json::array();
  for (const auto& w : r.workers) workers.push_back(to_json(w));
  return {{"workers", workers}, {"aggregate", to_json(r.aggregate)}};
}

nlohmann::json to_json(const PoolStats& s) {
  return {{"total_tiles", s.total_tiles},       {"free_tiles", s.free_tiles},
          {"used_tiles", s.used_tiles},         {"live_sequences", s.live_sequences},
          {"live_tokens", s.live_tokens},       {"internal_waste_slots", s.internal_waste_slots}};
}

}  // namespace tilelm
