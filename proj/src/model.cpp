#include "tilelm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "tilelm/errors.hpp"

namespace tilelm {

std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string decode(std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : tokens)
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || head_dim < 1 ||
      d_ff < 1 || max_seq_len < 1)
    throw InvalidConfig("model dimensions must all be >= 1");
  if (d_model != n_heads * head_dim) throw InvalidConfig("d_model must equal n_heads * head_dim");
  if (eos_token < 0 || static_cast<std::size_t>(eos_token) >= vocab_size)
    throw InvalidConfig("eos_token outside vocabulary");
}

Preset parse_preset(std::string_view name) {
  if (name == "tiny") return Preset::Tiny;
  if (name == "small") return Preset::Small;
  throw InvalidConfig("unknown preset '" + std::string(name) + "'");
}

ModelConfig preset_config(Preset preset) {
  ModelConfig c;
  if (preset == Preset::Small) {
    c.d_model = 128;
    c.n_layers = 4;
    c.n_heads = 8;
    c.head_dim = 16;
    c.d_ff = 512;
    c.max_seq_len = 1024;
  }
  return c;
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  token_embedding = Matrix(config_.vocab_size, d);
  position_embedding = Matrix(config_.max_seq_len, d);
  layers.resize(config_.n_layers);
  for (auto& l : layers) {
    l.ln1_gamma.assign(d, 1.0f);
    l.ln1_beta.assign(d, 0.0f);
    l.w_qkv = Matrix(d, 3 * d);
    l.b_qkv.assign(3 * d, 0.0f);
    l.w_out = Matrix(d, d);
    l.b_out.assign(d, 0.0f);
    l.ln2_gamma.assign(d, 1.0f);
    l.ln2_beta.assign(d, 0.0f);
    l.w_fc = Matrix(d, config_.d_ff);
    l.b_fc.assign(config_.d_ff, 0.0f);
    l.w_proj = Matrix(config_.d_ff, d);
    l.b_proj.assign(d, 0.0f);
  }
  lnf_gamma.assign(d, 1.0f);
  lnf_beta.assign(d, 0.0f);
  lm_head = Matrix(d, config_.vocab_size);
}

void Model::finalize() {
  if (config_.tied_embeddings) lm_head = transpose(token_embedding);
}

namespace {

template <typename Self, typename View>
std::vector<View> collect_tensors(Self& m) {
  std::vector<View> out;
  auto mat = [&](std::string name, auto& x) {
    out.push_back(View{std::move(name), x.rows, x.cols, std::span(x.data)});
  };
  auto vec = [&](std::string name, auto& v) {
    out.push_back(View{std::move(name), 1, v.size(), std::span(v)});
  };
  mat("wte", m.token_embedding);
  mat("wpe", m.position_embedding);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "h." + std::to_string(i) + ".";
    vec(p + "ln_1.weight", l.ln1_gamma);
    vec(p + "ln_1.bias", l.ln1_beta);
    mat(p + "attn.c_attn.weight", l.w_qkv);
    vec(p + "attn.c_attn.bias", l.b_qkv);
    mat(p + "attn.c_proj.weight", l.w_out);
    vec(p + "attn.c_proj.bias", l.b_out);
    vec(p + "ln_2.weight", l.ln2_gamma);
    vec(p + "ln_2.bias", l.ln2_beta);
    mat(p + "mlp.c_fc.weight", l.w_fc);
    vec(p + "mlp.c_fc.bias", l.b_fc);
    mat(p + "mlp.c_proj.weight", l.w_proj);
    vec(p + "mlp.c_proj.bias", l.b_proj);
  }
  vec("ln_f.weight", m.lnf_gamma);
  vec("ln_f.bias", m.lnf_beta);
  if (!m.config().tied_embeddings) mat("lm_head", m.lm_head);
  return out;
}

}  // namespace

std::vector<TensorView> Model::tensors() { return collect_tensors<Model, TensorView>(*this); }

std::vector<ConstTensorView> Model::tensors() const {
  return collect_tensors<const Model, ConstTensorView>(*this);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.data.size();
  return n;
}

bool Model::same_weights(const Model& other) const {
  if (!(config_ == other.config_)) return false;
  auto a = tensors();
  auto b = other.tensors();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].data.size() != b[i].data.size()) return false;
    if (!std::equal(a[i].data.begin(), a[i].data.end(), b[i].data.begin(),
                    [](float x, float y) { return std::bit_cast<std::uint32_t>(x) ==
                                                  std::bit_cast<std::uint32_t>(y); }))
      return false;
  }
  return true;
}

Model gen_random_model(const ModelConfig& config, std::uint64_t seed) {
  Model m(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  auto fill = [&](Matrix& x) {
    for (float& v : x.data) v = normal(rng);
  };
  fill(m.token_embedding);
  fill(m.position_embedding);
  for (auto& l : m.layers) {
    fill(l.w_qkv);
    fill(l.w_out);
    fill(l.w_fc);
    fill(l.w_proj);
  }
  if (!config.tied_embeddings) fill(m.lm_head);
  m.finalize();
  return m;
}

Model gen_random_model(Preset preset, std::uint64_t seed) {
  return gen_random_model(preset_config(preset), seed);
}

TilePoolConfig pool_config_for(const ModelConfig& config, std::size_t total_tiles,
                               std::size_t tile_size, AllocMode mode) {
  TilePoolConfig pc;
  pc.total_tiles = total_tiles;
  pc.tile_size = tile_size;
  pc.n_layers = config.n_layers;
  pc.n_kv_heads = config.n_heads;
  pc.head_dim = config.head_dim;
  pc.mode = mode;
  return pc;
}

TokenId greedy_sample(std::span<const float> logits) {
  if (logits.empty()) throw ShapeMismatch("greedy_sample: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

namespace {

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  for (TokenId t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw InvalidConfig("token id " + std::to_string(t) + " outside vocabulary");
}

Matrix embed(const Model& m, std::span<const TokenId> tokens, std::span<const std::size_t> positions) {
  const std::size_t d = m.config().d_model;
  Matrix x(tokens.size(), d);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    auto te = m.token_embedding.row(static_cast<std::size_t>(tokens[r]));
    auto pe = m.position_embedding.row(positions[r]);
    auto out = x.row(r);
    for (std::size_t i = 0; i < d; ++i) out[i] = te[i] + pe[i];
  }
  return x;
}

Matrix norm_rows(const Matrix& x, const std::vector<float>& gamma, const std::vector<float>& beta) {
  Matrix out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) layer_norm(x.row(r), gamma, beta, kLayerNormEps, out.row(r));
  return out;
}

void add_into(Matrix& x, const Matrix& y) {
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

// Runs every transformer block over the rows of x. attend_layer(layer, qkv,
// out) must fill out (rows x d_model) with the attention result for each row.
template <typename AttendLayer>
void run_blocks(const Model& m, Matrix& x, AttendLayer&& attend_layer) {
  const auto& c = m.config();
  const GemmBackend be = m.backend();
  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const LayerWeights& l = m.layers[li];
    Matrix h = norm_rows(x, l.ln1_gamma, l.ln1_beta);
    Matrix qkv = gemm(h, l.w_qkv, l.b_qkv, be);
    Matrix att(x.rows, c.d_model);
    attend_layer(li, qkv, att);
    add_into(x, gemm(att, l.w_out, l.b_out, be));
    h = norm_rows(x, l.ln2_gamma, l.ln2_beta);
    Matrix f = gemm(h, l.w_fc, l.b_fc, be);
    gelu_inplace(f.data);
    add_into(x, gemm(f, l.w_proj, l.b_proj, be));
  }
}

Matrix project_logits(const Model& m, const Matrix& x, std::span<const std::size_t> rows) {
  Matrix sel(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), sel.row(i).begin());
  }
  Matrix h = norm_rows(sel, m.lnf_gamma, m.lnf_beta);
  return gemm(h, m.lm_head, {}, m.backend());
}

AttentionShape attention_shape(const ModelConfig& c) { return {c.n_heads, c.head_dim}; }

float attention_scale(const ModelConfig& c) {
  return 1.0f / std::sqrt(static_cast<float>(c.head_dim));
}

// Writes each row's K and V into its slot, then attends every row over its
// sequence prefix through the tiles.
void paged_attend_layer(const Model& m, TilePool& pool, std::size_t layer, const Matrix& qkv,
                        std::span<const SeqId> row_seq, std::span<const std::size_t> row_pos,
                        std::span<const SlotRef> row_slot, Matrix& out) {
  const auto& c = m.config();
  const std::size_t d = c.d_model;
  for (std::size_t r = 0; r < qkv.rows; ++r) {
    auto src = qkv.row(r);
    auto k = pool.key(layer, row_slot[r]);
    auto v = pool.value(layer, row_slot[r]);
    std::copy(src.begin() + d, src.begin() + 2 * d, k.begin());
    std::copy(src.begin() + 2 * d, src.begin() + 3 * d, v.begin());
  }
  const float scale = attention_scale(c);
  for (std::size_t r = 0; r < qkv.rows; ++r) {
    paged_attention(qkv.row(r).first(d), pool, pool.table(row_seq[r]), layer, row_pos[r] + 1, scale,
                    attention_shape(c), out.row(r));
  }
}

}  // namespace

Matrix reference_forward(const Model& model, std::span<const TokenId> tokens) {
  const auto& c = model.config();
  if (tokens.empty()) throw InvalidConfig("reference_forward: empty sequence");
  if (tokens.size() > c.max_seq_len)
    throw PromptTooLong("sequence of " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                        std::to_string(c.max_seq_len));
  check_tokens(c, tokens);
  const std::size_t n = tokens.size(), d = c.d_model;
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  Matrix x = embed(model, tokens, positions);
  run_blocks(model, x, [&](std::size_t, const Matrix& qkv, Matrix& out) {
    std::vector<float> keys(n * d), values(n * d);
    for (std::size_t t = 0; t < n; ++t) {
      auto src = qkv.row(t);
      std::copy(src.begin() + d, src.begin() + 2 * d, keys.begin() + t * d);
      std::copy(src.begin() + 2 * d, src.begin() + 3 * d, values.begin() + t * d);
    }
    for (std::size_t t = 0; t < n; ++t)
      dense_attention(qkv.row(t).first(d), keys, values, t + 1, attention_scale(c),
                      attention_shape(c), out.row(t));
  });
  return project_logits(model, x, positions);
}

std::vector<std::vector<float>> prefill(const Model& model, std::span<const PrefillItem> batch,
                                        TilePool& pool) {
  const auto& c = model.config();
  std::size_t total = 0;
  for (const auto& item : batch) {
    if (item.tokens.empty()) throw InvalidConfig("prefill: empty prompt");
    if (item.tokens.size() > c.max_seq_len)
      throw PromptTooLong("prompt of " + std::to_string(item.tokens.size()) +
                          " tokens exceeds max_seq_len " + std::to_string(c.max_seq_len));
    check_tokens(c, item.tokens);
    if (pool.table(item.seq).token_count != 0)
      throw InvalidConfig("prefill: sequence " + std::to_string(item.seq) + " already holds KV");
    total += item.tokens.size();
  }
  if (batch.empty()) return {};

  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<SeqId> row_seq;
  std::vector<SlotRef> row_slot;
  std::vector<std::size_t> last_rows;
  tokens.reserve(total);
  positions.reserve(total);
  row_seq.reserve(total);
  row_slot.reserve(total);
  for (const auto& item : batch) {
    for (std::size_t p = 0; p < item.tokens.size(); ++p) {
      tokens.push_back(item.tokens[p]);
      positions.push_back(p);
      row_seq.push_back(item.seq);
      row_slot.push_back(pool.append_slot(item.seq));
    }
    last_rows.push_back(tokens.size() - 1);
  }

  Matrix x = embed(model, tokens, positions);
  run_blocks(model, x, [&](std::size_t layer, const Matrix& qkv, Matrix& out) {
    paged_attend_layer(model, pool, layer, qkv, row_seq, positions, row_slot, out);
  });
  Matrix logits = project_logits(model, x, last_rows);
  std::vector<std::vector<float>> result;
  result.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto row = logits.row(i);
    result.emplace_back(row.begin(), row.end());
  }
  return result;
}

std::vector<DecodeResult> decode_step(const Model& model, std::span<const DecodeItem> batch,
                                      TilePool& pool) {
  const auto& c = model.config();
  std::vector<DecodeResult> results(batch.size());
  std::vector<std::size_t> live;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<SeqId> row_seq;
  std::vector<SlotRef> row_slot;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    check_tokens(c, std::span(&item.token, 1));
    const std::size_t pos = pool.table(item.seq).token_count;
    if (pos >= c.max_seq_len) {
      results[i].status = DecodeStatus::ContextFull;
      continue;
    }
    try {
      row_slot.push_back(pool.append_slot(item.seq));
    } catch (const OutOfTiles&) {
      results[i].status = DecodeStatus::OutOfTiles;
      continue;
    }
    live.push_back(i);
    tokens.push_back(item.token);
    positions.push_back(pos);
    row_seq.push_back(item.seq);
  }
  if (live.empty()) return results;

  Matrix x = embed(model, tokens, positions);
  run_blocks(model, x, [&](std::size_t layer, const Matrix& qkv, Matrix& out) {
    paged_attend_layer(model, pool, layer, qkv, row_seq, positions, row_slot, out);
  });
  std::vector<std::size_t> rows(live.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  Matrix logits = project_logits(model, x, rows);
  for (std::size_t i = 0; i < live.size(); ++i) {
    auto row = logits.row(i);
    results[live[i]].logits.assign(row.begin(), row.end());
  }
  return results;
}

}  // namespace tilelm
