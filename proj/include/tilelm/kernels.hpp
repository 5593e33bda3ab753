#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tilelm/kv_tile_manager.hpp"

namespace tilelm {

// Row-major float32 matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<float> values);

  static Matrix identity(std::size_t n);

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

Matrix transpose(const Matrix& m);

struct BlockSizes {
  std::size_t m = 64;
  std::size_t n = 256;
  std::size_t k = 128;
};

enum class GemmBackend { Naive, Blocked };

GemmBackend parse_backend(std::string_view name);  // throws InvalidConfig
const char* to_string(GemmBackend backend);
std::vector<std::string> backend_names();

// Every backend accumulates each output element in ascending k order starting
// from zero and adds the bias last, so a row's result never depends on how
// many other rows share the call.
Matrix gemm_naive(const Matrix& a, const Matrix& b, std::span<const float> bias = {});
Matrix gemm_blocked(const Matrix& a, const Matrix& b, BlockSizes blocks,
                    std::span<const float> bias = {});
Matrix gemm(const Matrix& a, const Matrix& b, std::span<const float> bias = {},
            GemmBackend backend = GemmBackend::Blocked);

void softmax_inplace(std::span<float> row);
Matrix softmax_rows(const Matrix& m);

void layer_norm(std::span<const float> x, std::span<const float> gamma,
                std::span<const float> beta, float eps, std::span<float> out);
std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gamma,
                              std::span<const float> beta, float eps);

float gelu(float x);
void gelu_inplace(std::span<float> x);
std::vector<float> gelu(std::span<const float> x);

struct AttentionShape {
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;
  std::size_t width() const { return n_heads * head_dim; }
};

// Causal attention of one query row over positions [0, past_len) whose K/V
// rows live in tiles. Gathers through the block table, no contiguous copy.
void paged_attention(std::span<const float> query, const TilePool& pool, const BlockTable& table,
                     std::size_t layer, std::size_t past_len, float scale,
                     AttentionShape shape, std::span<float> out);

// Same contract over contiguous K/V (past_len x width, row-major).
void dense_attention(std::span<const float> query, std::span<const float> keys,
                     std::span<const float> values, std::size_t past_len, float scale,
                     AttentionShape shape, std::span<float> out);

}  // namespace tilelm
