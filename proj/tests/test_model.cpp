#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "tilelm/errors.hpp"
#include "tilelm/model.hpp"

using namespace tilelm;
namespace fs = std::filesystem;

namespace {

const Model& tiny() {
  static const Model m = gen_random_model(Preset::Tiny, 7);
  return m;
}

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng() % 256);
  return t;
}

TilePool pool_for(const Model& m, std::size_t tiles, std::size_t tile_size) {
  return TilePool(pool_config_for(m.config(), tiles, tile_size));
}

std::vector<float> last_row(const Matrix& m) {
  auto r = m.row(m.rows - 1);
  return {r.begin(), r.end()};
}

// Independent argmax: first index holding the maximum.
TokenId argmax_oracle(const std::vector<float>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<TokenId>(best);
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("tilelm_test_" + std::to_string(::getpid()) + "_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("byte tokenizer") {
  const auto t = encode("hi\xff");
  CHECK(t == std::vector<TokenId>{'h', 'i', 255});
  CHECK(decode(t) == "hi\xff");
  const std::vector<TokenId> with_eos{'a', kEosToken, 'b'};
  CHECK(decode(with_eos) == "ab");
}

TEST_CASE("gen_random_model determinism") {
  const Model a = gen_random_model(Preset::Tiny, 7);
  const Model b = gen_random_model(Preset::Tiny, 7);
  const Model c = gen_random_model(Preset::Tiny, 8);
  CHECK(a.same_weights(b));
  CHECK_FALSE(a.same_weights(c));
  CHECK(a.config() == preset_config(Preset::Tiny));
}

TEST_CASE("tiny parameter count in closed form") {
  const ModelConfig c = preset_config(Preset::Tiny);
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 2 * d            // ln_1
                                + d * 3 * d + 3 * d  // qkv
                                + d * d + d      // attention out
                                + 2 * d          // ln_2
                                + d * f + f      // fc
                                + f * d + d;     // proj
  const std::size_t want = c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
  CHECK(tiny().parameter_count() == want);
  CHECK(want == 149504);
}

TEST_CASE("preset names") {
  CHECK(parse_preset("tiny") == Preset::Tiny);
  CHECK(parse_preset("small") == Preset::Small);
  CHECK_THROWS_AS(parse_preset("huge"), InvalidConfig);
  ModelConfig bad = preset_config(Preset::Tiny);
  bad.head_dim = 15;
  CHECK_THROWS_AS(bad.validate(), InvalidConfig);
}

TEST_CASE("save/load round trip") {
  const auto path = temp_path("rt.tlm");
  save_model(tiny(), path);
  const Model back = load_model(path);
  CHECK(back.config() == tiny().config());
  CHECK(back.same_weights(tiny()));
  const auto prompt = encode("round trip");
  CHECK(reference_forward(back, prompt) == reference_forward(tiny(), prompt));

  const std::string bytes = slurp(path);
  CHECK(bytes.substr(0, 4) == "TLM1");

  SUBCASE("truncated") {
    spit(path, bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_AS(load_model(path), CorruptFile);
    spit(path, bytes.substr(0, 6));
    CHECK_THROWS_AS(load_model(path), CorruptFile);
  }
  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    spit(path, b);
    CHECK_THROWS_AS(load_model(path), CorruptFile);
  }
  SUBCASE("wrong tensor byte length in the header") {
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 4, 4);
    auto header = nlohmann::json::parse(bytes.substr(8, hlen));
    const std::size_t payload_at = (8 + hlen + 63) / 64 * 64;
    header["tensors"][0]["length"] = header["tensors"][0]["length"].get<std::size_t>() - 4;
    const std::string h = header.dump();
    std::string out = "TLM1";
    const auto n = static_cast<std::uint32_t>(h.size());
    out.append(reinterpret_cast<const char*>(&n), 4);
    out += h;
    out.resize((out.size() + 63) / 64 * 64, '\0');
    out += bytes.substr(payload_at);
    spit(path, out);
    CHECK_THROWS_AS(load_model(path), CorruptFile);
  }
  fs::remove(path);
}

TEST_CASE("reference_forward shape") {
  const std::vector<TokenId> one{'x'};
  const Matrix l = reference_forward(tiny(), one);
  CHECK(l.rows == 1);
  CHECK(l.cols == tiny().config().vocab_size);
}

TEST_CASE("prefill matches the dense reference") {
  std::mt19937_64 rng(11);
  const auto prompt = random_tokens(37, rng);
  auto pool = pool_for(tiny(), 16, 4);
  pool.allocate_sequence(1, prompt.size());
  const std::vector<PrefillItem> batch{{1, prompt}};
  const auto logits = prefill(tiny(), batch, pool);
  REQUIRE(logits.size() == 1);
  const auto want = last_row(reference_forward(tiny(), prompt));
  double worst = 0;
  for (std::size_t i = 0; i < want.size(); ++i)
    worst = std::max(worst, static_cast<double>(std::abs(logits[0][i] - want[i])));
  CHECK(worst < 1e-4);
  CHECK(pool.table(1).token_count == prompt.size());
}

TEST_CASE("batched prefill equals single-sequence prefill bitwise") {
  std::mt19937_64 rng(12);
  std::vector<std::vector<TokenId>> prompts;
  for (std::size_t n : {3, 17, 1, 40}) prompts.push_back(random_tokens(n, rng));

  auto pool = pool_for(tiny(), 64, 8);
  std::vector<PrefillItem> batch;
  for (SeqId s = 0; s < prompts.size(); ++s) {
    pool.allocate_sequence(s, prompts[s].size());
    batch.push_back({s, prompts[s]});
  }
  const auto together = prefill(tiny(), batch, pool);
  for (SeqId s = 0; s < prompts.size(); ++s) {
    auto solo_pool = pool_for(tiny(), 64, 8);
    solo_pool.allocate_sequence(0, prompts[s].size());
    const std::vector<PrefillItem> one{{0, prompts[s]}};
    CHECK(prefill(tiny(), one, solo_pool)[0] == together[s]);
  }
}

TEST_CASE("prefill rejects prompts past the context window") {
  const std::vector<TokenId> long_prompt(tiny().config().max_seq_len + 1, 'a');
  auto pool = pool_for(tiny(), 64, 16);
  pool.allocate_sequence(1, long_prompt.size());
  const std::vector<PrefillItem> batch{{1, long_prompt}};
  CHECK_THROWS_AS(prefill(tiny(), batch, pool), PromptTooLong);
}

TEST_CASE("greedy decode equals the dense reference rerun per step") {
  std::mt19937_64 rng(13);
  const auto prompt = random_tokens(9, rng);

  // Oracle: full dense forward over the growing stream every step.
  std::vector<TokenId> want = prompt;
  for (int i = 0; i < 10; ++i) want.push_back(argmax_oracle(last_row(reference_forward(tiny(), want))));

  auto pool = pool_for(tiny(), 12, 2);
  pool.allocate_sequence(1, prompt.size());
  const std::vector<PrefillItem> pre{{1, prompt}};
  std::vector<TokenId> got = prompt;
  got.push_back(greedy_sample(prefill(tiny(), pre, pool)[0]));
  while (got.size() < want.size()) {
    const std::vector<DecodeItem> item{{1, got.back()}};
    auto r = decode_step(tiny(), item, pool);
    REQUIRE(r[0].status == DecodeStatus::Ok);
    got.push_back(greedy_sample(r[0].logits));
  }
  CHECK(got == want);
}

TEST_CASE("batched decode equals separate decode") {
  std::mt19937_64 rng(14);
  std::vector<std::vector<TokenId>> prompts;
  for (std::size_t n : {5, 12, 2}) prompts.push_back(random_tokens(n, rng));

  auto run = [&](std::vector<std::size_t> members) {
    auto pool = pool_for(tiny(), 64, 4);
    std::vector<std::vector<TokenId>> streams;
    std::vector<PrefillItem> pre;
    for (std::size_t s : members) {
      pool.allocate_sequence(s, prompts[s].size());
      streams.push_back(prompts[s]);
    }
    for (std::size_t i = 0; i < members.size(); ++i) pre.push_back({members[i], streams[i]});
    auto logits = prefill(tiny(), pre, pool);
    for (std::size_t i = 0; i < members.size(); ++i) streams[i].push_back(greedy_sample(logits[i]));
    for (int step = 0; step < 8; ++step) {
      std::vector<DecodeItem> items;
      for (std::size_t i = 0; i < members.size(); ++i) items.push_back({members[i], streams[i].back()});
      auto r = decode_step(tiny(), items, pool);
      for (std::size_t i = 0; i < members.size(); ++i) streams[i].push_back(greedy_sample(r[i].logits));
    }
    return streams;
  };
  const auto together = run({0, 1, 2});
  for (std::size_t s = 0; s < 3; ++s) CHECK(run({s})[0] == together[s]);
}

TEST_CASE("decode isolates an out-of-tiles sequence") {
  auto pool = pool_for(tiny(), 2, 4);
  const std::vector<TokenId> a{'a', 'b', 'c', 'd'}, b{'x'};
  pool.allocate_sequence(1, a.size());
  pool.allocate_sequence(2, b.size());
  const std::vector<PrefillItem> pre{{1, a}, {2, b}};
  prefill(tiny(), pre, pool);
  REQUIRE(pool.free_tile_count() == 0);
  const std::vector<DecodeItem> items{{1, 'e'}, {2, 'y'}};
  const auto r = decode_step(tiny(), items, pool);
  CHECK(r[0].status == DecodeStatus::OutOfTiles);
  CHECK(r[0].logits.empty());
  CHECK(pool.table(1).token_count == 4);
  CHECK(r[1].status == DecodeStatus::Ok);
  CHECK(r[1].logits.size() == tiny().config().vocab_size);
}

TEST_CASE("greedy_sample") {
  std::vector<float> v(12, 0.0f);
  v[7] = 1.0f;
  CHECK(greedy_sample(v) == 7);
  v[7] = 0.0f;
  v[5] = v[9] = 2.0f;
  CHECK(greedy_sample(v) == 5);
  std::mt19937_64 rng(15);
  std::normal_distribution<float> d;
  for (int t = 0; t < 100; ++t) {
    std::vector<float> x(260);
    for (auto& e : x) e = d(rng);
    CHECK(greedy_sample(x) == argmax_oracle(x));
  }
}

TEST_CASE("backends produce identical logits") {
  Model naive = gen_random_model(Preset::Tiny, 7);
  naive.set_backend(GemmBackend::Naive);
  const auto prompt = encode("backend seam");
  CHECK(reference_forward(naive, prompt) == reference_forward(tiny(), prompt));
}
