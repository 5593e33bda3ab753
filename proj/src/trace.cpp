#include "tilelm/trace.hpp"

#include <fstream>
#include <random>

#include "json.hpp"
#include "tilelm/errors.hpp"

namespace tilelm {

std::vector<TraceRecord> parse_trace(std::istream& in) {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    TraceRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw MalformedTrace(lineno, "expected a JSON object");
      r.arrival_ms = j.at("arrival_ms").get<std::int64_t>();
      r.prompt = j.at("prompt").get<std::string>();
      const auto max_new = j.at("max_new_tokens").get<std::int64_t>();
      if (max_new < 1) throw MalformedTrace(lineno, "max_new_tokens must be >= 1");
      r.max_new_tokens = static_cast<std::size_t>(max_new);
      if (j.contains("gen_tokens")) {
        const auto g = j.at("gen_tokens").get<std::int64_t>();
        if (g < 1 || static_cast<std::size_t>(g) > r.max_new_tokens)
          throw MalformedTrace(lineno, "gen_tokens must be in [1, max_new_tokens]");
        r.gen_tokens = static_cast<std::size_t>(g);
      }
    } catch (const nlohmann::json::exception& e) {
      throw MalformedTrace(lineno, e.what());
    }
    if (r.arrival_ms < 0) throw MalformedTrace(lineno, "arrival_ms must be >= 0");
    if (r.prompt.empty()) throw MalformedTrace(lineno, "prompt must be non-empty");
    if (!out.empty() && r.arrival_ms < out.back().arrival_ms)
      throw MalformedTrace(lineno, "records must be sorted by arrival_ms");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<TraceRecord> load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trace " + path.string());
  return parse_trace(in);
}

void write_trace(std::ostream& out, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace) {
    nlohmann::json j{{"arrival_ms", r.arrival_ms},
                     {"prompt", r.prompt},
                     {"max_new_tokens", r.max_new_tokens}};
    if (r.gen_tokens) j["gen_tokens"] = *r.gen_tokens;
    out << j.dump() << '\n';
  }
}

void save_trace(const std::filesystem::path& path, const std::vector<TraceRecord>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_trace(out, trace);
}

std::vector<Request> to_requests(const std::vector<TraceRecord>& trace) {
  std::vector<Request> out;
  out.reserve(trace.size());
  for (const auto& r : trace) out.push_back({r.prompt, r.max_new_tokens, r.arrival_ms * 1000});
  return out;
}

std::vector<TraceRecord> generate_trace(const TraceSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::vector<TraceRecord> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    TraceRecord r;
    r.arrival_ms = static_cast<std::int64_t>(i) * spec.arrival_spacing_ms;
    const std::size_t len = uniform(spec.min_prompt, spec.max_prompt);
    r.prompt.resize(len);
    for (auto& ch : r.prompt) ch = static_cast<char>(uniform(32, 126));
    r.max_new_tokens = uniform(spec.min_new, spec.max_new);
    if (spec.gen_fraction) {
      const double f =
          std::uniform_real_distribution<double>(spec.gen_fraction->first, spec.gen_fraction->second)(rng);
      const auto g = static_cast<std::size_t>(f * static_cast<double>(r.max_new_tokens) + 0.5);
      r.gen_tokens = std::clamp<std::size_t>(g, 1, r.max_new_tokens);
    }
    out.push_back(std::move(r));
  }
  return out;
}

TraceSpec skewed_alloc_trace_spec() {
  TraceSpec s;
  s.count = 200;
  s.min_prompt = 16;
  s.max_prompt = 64;
  s.min_new = 128;
  s.max_new = 512;
  s.gen_fraction = std::make_pair(0.05, 0.45);
  return s;
}

}  // namespace tilelm
