#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tilelm/kernels.hpp"
#include "tilelm/kv_tile_manager.hpp"

namespace tilelm {

using TokenId = std::int32_t;

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS, EOS and two
// reserved ids.
inline constexpr TokenId kBosToken = 256;
inline constexpr TokenId kEosToken = 257;
inline constexpr std::size_t kByteVocabSize = 260;

std::vector<TokenId> encode(std::string_view text);
// Drops every id that is not a byte.
std::string decode(std::span<const TokenId> tokens);

struct ModelConfig {
  std::size_t vocab_size = kByteVocabSize;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 512;
  TokenId eos_token = kEosToken;
  bool tied_embeddings = true;

  void validate() const;  // throws InvalidConfig
  bool operator==(const ModelConfig&) const = default;
};

enum class Preset { Tiny, Small };
Preset parse_preset(std::string_view name);
ModelConfig preset_config(Preset preset);

struct LayerWeights {
  std::vector<float> ln1_gamma, ln1_beta;
  Matrix w_qkv;  // d_model x 3*d_model, columns [q | k | v]
  std::vector<float> b_qkv;
  Matrix w_out;  // d_model x d_model
  std::vector<float> b_out;
  std::vector<float> ln2_gamma, ln2_beta;
  Matrix w_fc;  // d_model x d_ff
  std::vector<float> b_fc;
  Matrix w_proj;  // d_ff x d_model
  std::vector<float> b_proj;
};

template <typename T>
struct BasicTensorView {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<T> data;
};
using TensorView = BasicTensorView<float>;
using ConstTensorView = BasicTensorView<const float>;

// GPT-2-style decoder: pre-norm blocks, learned absolute positions, tanh-GELU
// MLP. Immutable after construction; safe to share across workers.
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);  // zero weights, unit norms

  const ModelConfig& config() const { return config_; }
  GemmBackend backend() const { return backend_; }
  void set_backend(GemmBackend backend) { backend_ = backend; }

  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  std::vector<float> lnf_gamma, lnf_beta;
  Matrix lm_head;  // d_model x vocab; serialized only when untied

  // Recomputes lm_head from token_embedding when embeddings are tied.
  void finalize();

  // Serialized tensors in file order.
  std::vector<TensorView> tensors();
  std::vector<ConstTensorView> tensors() const;
  std::size_t parameter_count() const;

  bool same_weights(const Model& other) const;

 private:
  ModelConfig config_;
  GemmBackend backend_ = GemmBackend::Blocked;
};

Model gen_random_model(Preset preset, std::uint64_t seed);
Model gen_random_model(const ModelConfig& config, std::uint64_t seed);

// "TLM1" | u32le header length | JSON header | 64-byte aligned f32le payloads.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);  // throws CorruptFile

constexpr float kLayerNormEps = 1e-5f;

// Dense causal forward over contiguous KV; logits for every position.
Matrix reference_forward(const Model& model, std::span<const TokenId> tokens);

struct PrefillItem {
  SeqId seq = 0;
  std::span<const TokenId> tokens;
};

// Writes KV for every prompt position into the sequences' pre-allocated tiles
// and returns last-position logits, one vector per item.
std::vector<std::vector<float>> prefill(const Model& model, std::span<const PrefillItem> batch,
                                        TilePool& pool);

struct DecodeItem {
  SeqId seq = 0;
  TokenId token = 0;  // last emitted token; its KV is written this step
};

enum class DecodeStatus { Ok, OutOfTiles, ContextFull };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::Ok;
  std::vector<float> logits;
};

// Failures are isolated per sequence; a failed sequence's table is untouched.
std::vector<DecodeResult> decode_step(const Model& model, std::span<const DecodeItem> batch,
                                      TilePool& pool);

// Argmax with ties resolved toward the lowest id.
TokenId greedy_sample(std::span<const float> logits);

// Tile pool geometry matching the model's KV layout.
TilePoolConfig pool_config_for(const ModelConfig& config, std::size_t total_tiles,
                               std::size_t tile_size, AllocMode mode = AllocMode::Tiled);

}  // namespace tilelm
