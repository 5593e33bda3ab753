#include "tilelm/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "tilelm/errors.hpp"

namespace tilelm {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<float> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) throw ShapeMismatch("matrix data size does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) t(c, r) = m(r, c);
  return t;
}

GemmBackend parse_backend(std::string_view name) {
  if (name == "naive") return GemmBackend::Naive;
  if (name == "blocked") return GemmBackend::Blocked;
  throw InvalidConfig("unknown kernel backend '" + std::string(name) + "'");
}

const char* to_string(GemmBackend backend) {
  return backend == GemmBackend::Naive ? "naive" : "blocked";
}

std::vector<std::string> backend_names() { return {"naive", "blocked"}; }

namespace {

void check_gemm_shapes(const Matrix& a, const Matrix& b, std::span<const float> bias) {
  if (a.cols != b.rows)
    throw ShapeMismatch("gemm: A is " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                        ", B is " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
  if (!bias.empty() && bias.size() != b.cols)
    throw ShapeMismatch("gemm: bias length " + std::to_string(bias.size()) + " != " +
                        std::to_string(b.cols));
}

void add_bias(Matrix& c, std::span<const float> bias) {
  if (bias.empty()) return;
  for (std::size_t i = 0; i < c.rows; ++i) {
    float* row = c.data.data() + i * c.cols;
    for (std::size_t j = 0; j < c.cols; ++j) row[j] = row[j] + bias[j];
  }
}

constexpr std::size_t kMr = 2;
constexpr std::size_t kNr = 16;

// Register tile of R rows x kNr columns; accumulates kc steps of the k loop
// into C in ascending order.
template <std::size_t R>
void micro_tile(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                std::size_t ldc, std::size_t kc) {
  float acc[R][kNr];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < kNr; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t p = 0; p < kc; ++p) {
    const float* brow = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const float av = a[r * lda + p];
      for (std::size_t j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < kNr; ++j) c[r * ldc + j] = acc[r][j];
}

void edge_tile(std::size_t rows, std::size_t cols, const float* a, std::size_t lda,
               const float* b, std::size_t ldb, float* c, std::size_t ldc, std::size_t kc) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      float acc = c[r * ldc + j];
      for (std::size_t p = 0; p < kc; ++p) acc += a[r * lda + p] * b[p * ldb + j];
      c[r * ldc + j] = acc;
    }
  }
}

void dispatch_tile(std::size_t rows, std::size_t cols, const float* a, std::size_t lda,
                   const float* b, std::size_t ldb, float* c, std::size_t ldc, std::size_t kc) {
  if (cols == kNr) {
    switch (rows) {
      case 2: return micro_tile<2>(a, lda, b, ldb, c, ldc, kc);
      case 1: return micro_tile<1>(a, lda, b, ldb, c, ldc, kc);
      default: break;
    }
  }
  edge_tile(rows, cols, a, lda, b, ldb, c, ldc, kc);
}

}  // namespace

Matrix gemm_naive(const Matrix& a, const Matrix& b, std::span<const float> bias) {
  check_gemm_shapes(a, b, bias);
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < a.cols; ++p) acc += a(i, p) * b(p, j);
      c(i, j) = acc;
    }
  }
  add_bias(c, bias);
  return c;
}

Matrix gemm_blocked(const Matrix& a, const Matrix& b, BlockSizes blocks,
                    std::span<const float> bias) {
  check_gemm_shapes(a, b, bias);
  if (blocks.m < 1 || blocks.n < 1 || blocks.k < 1)
    throw InvalidConfig("gemm block sizes must be >= 1");
  const std::size_t m = a.rows, n = b.cols, k = a.cols;
  Matrix c(m, n);
  const float* ap = a.data.data();
  const float* bp = b.data.data();
  float* cp = c.data.data();
  for (std::size_t jc = 0; jc < n; jc += blocks.n) {
    const std::size_t nb = std::min(blocks.n, n - jc);
    for (std::size_t pc = 0; pc < k; pc += blocks.k) {
      const std::size_t kb = std::min(blocks.k, k - pc);
      for (std::size_t ic = 0; ic < m; ic += blocks.m) {
        const std::size_t mb = std::min(blocks.m, m - ic);
        // Column panels outermost so one kb x kNr slice of B stays hot
        // across every row tile.
        for (std::size_t j = 0; j < nb; j += kNr) {
          const std::size_t cols = std::min(kNr, nb - j);
          for (std::size_t i = 0; i < mb; i += kMr) {
            const std::size_t rows = std::min(kMr, mb - i);
            dispatch_tile(rows, cols, ap + (ic + i) * k + pc, k, bp + pc * n + jc + j, n,
                          cp + (ic + i) * n + jc + j, n, kb);
          }
        }
      }
    }
  }
  add_bias(c, bias);
  return c;
}

Matrix gemm(const Matrix& a, const Matrix& b, std::span<const float> bias, GemmBackend backend) {
  if (backend == GemmBackend::Naive) return gemm_naive(a, b, bias);
  return gemm_blocked(a, b, BlockSizes{}, bias);
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  const float mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (float& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (float& v : row) v *= inv;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows; ++r) softmax_inplace(out.row(r));
  return out;
}

void layer_norm(std::span<const float> x, std::span<const float> gamma,
                std::span<const float> beta, float eps, std::span<float> out) {
  if (gamma.size() != x.size() || beta.size() != x.size() || out.size() != x.size())
    throw ShapeMismatch("layer_norm: length mismatch");
  if (!(eps > 0.0f)) throw InvalidConfig("layer_norm: eps must be > 0");
  if (x.empty()) return;
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x) {
    const double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(x.size());
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<float>((x[i] - mean) * rstd) * gamma[i] + beta[i];
}

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gamma,
                              std::span<const float> beta, float eps) {
  std::vector<float> out(x.size());
  layer_norm(x, gamma, beta, eps, out);
  return out;
}

float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

void gelu_inplace(std::span<float> x) {
  for (float& v : x) v = gelu(v);
}

std::vector<float> gelu(std::span<const float> x) {
  std::vector<float> out(x.begin(), x.end());
  gelu_inplace(out);
  return out;
}

namespace {

// Shared scoring core; KeyRow/ValueRow map a position to its full K/V row.
template <typename KeyRow, typename ValueRow>
void attend(std::span<const float> query, std::size_t past_len, float scale,
            AttentionShape shape, std::span<float> out, KeyRow key_row, ValueRow value_row) {
  if (query.size() != shape.width() || out.size() != shape.width())
    throw ShapeMismatch("attention: query/output width mismatch");
  if (past_len == 0) throw PositionOutOfRange("attention over an empty context");
  std::vector<float> scores(past_len);
  std::fill(out.begin(), out.end(), 0.0f);
  for (std::size_t h = 0; h < shape.n_heads; ++h) {
    const std::size_t base = h * shape.head_dim;
    const float* q = query.data() + base;
    for (std::size_t t = 0; t < past_len; ++t) {
      const float* kr = key_row(t) + base;
      float dot = 0.0f;
      for (std::size_t d = 0; d < shape.head_dim; ++d) dot += q[d] * kr[d];
      scores[t] = dot * scale;
    }
    softmax_inplace(scores);
    float* o = out.data() + base;
    for (std::size_t t = 0; t < past_len; ++t) {
      const float* vr = value_row(t) + base;
      const float p = scores[t];
      for (std::size_t d = 0; d < shape.head_dim; ++d) o[d] += p * vr[d];
    }
  }
}

}  // namespace

void paged_attention(std::span<const float> query, const TilePool& pool, const BlockTable& table,
                     std::size_t layer, std::size_t past_len, float scale,
                     AttentionShape shape, std::span<float> out) {
  if (past_len > table.token_count)
    throw PositionOutOfRange("past_len " + std::to_string(past_len) + " exceeds token_count " +
                             std::to_string(table.token_count));
  if (shape.width() != pool.config().slot_width())
    throw ShapeMismatch("attention width does not match tile pool slot width");
  const std::size_t tile_size = pool.tile_size();
  attend(
      query, past_len, scale, shape, out,
      [&](std::size_t t) {
        return pool.key(layer, {table.tiles[t / tile_size], t % tile_size}).data();
      },
      [&](std::size_t t) {
        return pool.value(layer, {table.tiles[t / tile_size], t % tile_size}).data();
      });
}

void dense_attention(std::span<const float> query, std::span<const float> keys,
                     std::span<const float> values, std::size_t past_len, float scale,
                     AttentionShape shape, std::span<float> out) {
  const std::size_t w = shape.width();
  if (keys.size() < past_len * w || values.size() < past_len * w)
    throw PositionOutOfRange("dense attention: K/V shorter than past_len");
  attend(
      query, past_len, scale, shape, out, [&](std::size_t t) { return keys.data() + t * w; },
      [&](std::size_t t) { return values.data() + t * w; });
}

}  // namespace tilelm
