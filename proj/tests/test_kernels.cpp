#include <cmath>
#include <random>

#include "doctest.h"
#include "tilelm/errors.hpp"
#include "tilelm/kernels.hpp"

using namespace tilelm;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  Matrix m(r, c);
  for (auto& x : m.data) x = d(rng);
  return m;
}

// Triple loop in double precision.
Matrix oracle_matmul(const Matrix& a, const Matrix& b, const std::vector<float>& bias = {}) {
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = bias.empty() ? 0.0 : bias[j];
      for (std::size_t k = 0; k < a.cols; ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<float>(s);
    }
  return c;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.rows == b.rows);
  REQUIRE(a.cols == b.cols);
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
  return m;
}

std::vector<long double> softmax_oracle(const std::vector<float>& x) {
  long double mx = x[0];
  for (float v : x) mx = std::max<long double>(mx, v);
  long double sum = 0;
  std::vector<long double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) sum += e[i] = std::exp(static_cast<long double>(x[i]) - mx);
  for (auto& v : e) v /= sum;
  return e;
}

}  // namespace

TEST_CASE("gemm small cases") {
  std::mt19937_64 rng(1);
  const Matrix b = random_matrix(3, 2, rng);
  CHECK(gemm(Matrix::identity(3), b) == b);
  CHECK(gemm_naive(Matrix::identity(3), b) == b);

  const Matrix x(1, 1, std::vector<float>{2.0f});
  const Matrix y(1, 1, std::vector<float>{3.0f});
  CHECK(gemm(x, y)(0, 0) == 6.0f);
  CHECK_THROWS_AS(gemm(Matrix(2, 3), Matrix(4, 2)), ShapeMismatch);
}

TEST_CASE("gemm against the double-precision oracle") {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(33, 17, rng);
  const Matrix b = random_matrix(17, 29, rng);
  std::vector<float> bias(29);
  for (std::size_t j = 0; j < bias.size(); ++j) bias[j] = 0.1f * static_cast<float>(j);
  const Matrix want = oracle_matmul(a, b, bias);
  CHECK(max_abs_diff(gemm_naive(a, b, bias), want) < 1e-4);
  CHECK(max_abs_diff(gemm_blocked(a, b, {8, 8, 8}, bias), want) < 1e-4);
  CHECK(max_abs_diff(gemm_blocked(a, b, {1000, 1000, 1000}, bias), want) < 1e-4);
  // Same accumulation order across backends, so results are bitwise equal.
  CHECK(gemm_blocked(a, b, {8, 8, 8}, bias) == gemm_naive(a, b, bias));
  CHECK(gemm_blocked(a, b, {1000, 1000, 1000}, bias) == gemm_naive(a, b, bias));
  CHECK_THROWS_AS(gemm_blocked(a, b, {0, 8, 8}), InvalidConfig);
}

TEST_CASE("gemm rows do not depend on the batch they share") {
  std::mt19937_64 rng(3);
  const Matrix a = random_matrix(9, 40, rng);
  const Matrix b = random_matrix(40, 70, rng);
  const Matrix full = gemm(a, b);
  for (std::size_t r = 0; r < a.rows; ++r) {
    Matrix one(1, a.cols);
    std::copy(a.row(r).begin(), a.row(r).end(), one.data.begin());
    const Matrix got = gemm(one, b);
    CHECK(std::equal(got.data.begin(), got.data.end(), full.row(r).begin()));
  }
}

TEST_CASE("backend names") {
  CHECK(parse_backend("naive") == GemmBackend::Naive);
  CHECK(parse_backend("blocked") == GemmBackend::Blocked);
  CHECK(std::string(to_string(GemmBackend::Blocked)) == "blocked");
  CHECK_THROWS_AS(parse_backend("amx"), InvalidConfig);
}

TEST_CASE("softmax") {
  std::vector<float> eq{3, 3, 3, 3};
  softmax_inplace(eq);
  for (float v : eq) CHECK(v == doctest::Approx(0.25));

  std::vector<float> big{1000, 0};
  softmax_inplace(big);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> d(-20.0f, 20.0f);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<float> x(1 + rng() % 300);
    for (auto& v : x) v = d(rng);
    const auto want = softmax_oracle(x);
    softmax_inplace(x);
    for (std::size_t i = 0; i < x.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(x[i] - want[i])));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("layer_norm") {
  const std::vector<float> ones(5, 1.0f), zeros(5, 0.0f);
  const std::vector<float> c(5, 7.5f);
  for (float v : layer_norm(c, ones, zeros, 1e-5f)) CHECK(v == 0.0f);

  const std::vector<float> g2(2, 1.0f), b2(2, 0.0f);
  const auto y = layer_norm(std::vector<float>{1.0f, -1.0f}, g2, b2, 1e-5f);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-5));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> dx(-3.0f, 3.0f), dg(0.5f, 1.5f), db(-0.5f, 0.5f);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng() % 255;
    std::vector<float> x(n), g(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = dx(rng);
      g[i] = dg(rng);
      b[i] = db(rng);
    }
    long double mean = 0, var = 0;
    for (float v : x) mean += v;
    mean /= n;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= n;
    const long double inv = 1.0L / std::sqrt(var + static_cast<long double>(1e-5f));
    const auto got = layer_norm(x, g, b, 1e-5f);
    for (std::size_t i = 0; i < n; ++i) {
      const long double want = (x[i] - mean) * inv * g[i] + b[i];
      worst = std::max(worst, static_cast<double>(std::abs(got[i] - want)));
    }
  }
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(layer_norm(std::vector<float>(4), ones, zeros, 1e-5f), ShapeMismatch);
  CHECK_THROWS_AS(layer_norm(c, ones, zeros, 0.0f), InvalidConfig);
}

TEST_CASE("gelu") {
  CHECK(gelu(0.0f) == 0.0f);
  for (float x : {-3.0f, -1.0f, -0.25f, 0.5f, 1.0f, 2.5f}) {
    const double xd = x;
    const double want = 0.5 * xd * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (xd + 0.044715 * xd * xd * xd)));
    CHECK(gelu(x) == doctest::Approx(want).epsilon(1e-5));
  }
}

namespace {

// Causal attention of one query over rows [0, past_len) in double precision.
std::vector<double> attention_oracle(const std::vector<float>& q, const std::vector<float>& k,
                                     const std::vector<float>& v, std::size_t past_len,
                                     double scale, AttentionShape s) {
  std::vector<double> out(s.width(), 0.0);
  for (std::size_t h = 0; h < s.n_heads; ++h) {
    std::vector<double> score(past_len);
    double mx = -1e300;
    for (std::size_t p = 0; p < past_len; ++p) {
      double d = 0;
      for (std::size_t i = 0; i < s.head_dim; ++i)
        d += static_cast<double>(q[h * s.head_dim + i]) * k[p * s.width() + h * s.head_dim + i];
      score[p] = d * scale;
      mx = std::max(mx, score[p]);
    }
    double sum = 0;
    for (auto& x : score) sum += x = std::exp(x - mx);
    for (std::size_t p = 0; p < past_len; ++p)
      for (std::size_t i = 0; i < s.head_dim; ++i)
        out[h * s.head_dim + i] += score[p] / sum * v[p * s.width() + h * s.head_dim + i];
  }
  return out;
}

}  // namespace

TEST_CASE("attention over a single position returns its value row") {
  const AttentionShape s{2, 3};
  const std::vector<float> q{1, 2, 3, 4, 5, 6}, k{0.5f, 1, 1, 2, 2, 2}, v{9, 8, 7, 6, 5, 4};
  std::vector<float> out(6);
  dense_attention(q, k, v, 1, 0.5f, s, out);
  CHECK(out == v);
}

TEST_CASE("paged attention over scattered tiles matches the dense oracle") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  const AttentionShape s{2, 4};
  TilePoolConfig c;
  c.total_tiles = 16;
  c.tile_size = 3;
  c.n_layers = 2;
  c.n_kv_heads = s.n_heads;
  c.head_dim = s.head_dim;
  TilePool pool(c);

  // Four sequences of different lengths, growing in lockstep so their tiles
  // interleave in the arena.
  const std::vector<std::size_t> lens{1, 5, 8, 11};
  std::vector<std::vector<float>> keys(lens.size()), values(lens.size());
  for (SeqId q = 0; q < lens.size(); ++q) pool.allocate_sequence(q, 1);
  for (std::size_t step = 0; step < 11; ++step)
    for (SeqId q = 0; q < lens.size(); ++q) {
      if (step >= lens[q]) continue;
      const SlotRef slot = pool.append_slot(q);
      for (std::size_t i = 0; i < s.width(); ++i) {
        keys[q].push_back(d(rng));
        values[q].push_back(d(rng));
      }
      std::copy(keys[q].end() - s.width(), keys[q].end(), pool.key(1, slot).begin());
      std::copy(values[q].end() - s.width(), values[q].end(), pool.value(1, slot).begin());
    }
  const auto& t3 = pool.table(3).tiles;
  bool adjacent = true;
  for (std::size_t i = 1; i < t3.size(); ++i) adjacent = adjacent && t3[i] == t3[i - 1] + 1;
  CHECK_FALSE(adjacent);

  const float scale = 0.5f;
  for (SeqId q = 0; q < lens.size(); ++q) {
    std::vector<float> query(s.width());
    for (auto& x : query) x = d(rng);
    std::vector<float> paged(s.width()), dense(s.width());
    paged_attention(query, pool, pool.table(q), 1, lens[q], scale, s, paged);
    dense_attention(query, keys[q], values[q], lens[q], scale, s, dense);
    CHECK(paged == dense);
    const auto want = attention_oracle(query, keys[q], values[q], lens[q], scale, s);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(paged[i] - want[i]) < 1e-5);
  }
}
