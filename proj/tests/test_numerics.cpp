#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"

using namespace kangaroo;

namespace {

Matrix<double> random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix<double> m(r, c);
  for (auto& x : m.data) x = rng.normal();
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  const auto m = random_matrix(rng, 3, 5);
  EXPECT_EQ(matmul(Matrix<double>::identity(3), m), m);
}

TEST(Matmul, ZeroTimesAnythingIsZero) {
  Rng rng(2);
  const auto out = matmul(Matrix<double>(2, 3), random_matrix(rng, 3, 4));
  EXPECT_EQ(out.rows, 2u);
  EXPECT_EQ(out.cols, 4u);
  for (double x : out.data) EXPECT_EQ(x, 0.0);
}

TEST(Matmul, HandExample) {
  const Matrix<double> a{{1, 2}, {3, 4}};
  const Matrix<double> b{{1}, {1}};
  EXPECT_EQ(matmul(a, b), (Matrix<double>{{3}, {7}}));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix<double>(2, 3), Matrix<double>(2, 3)), DimensionError);
}

TEST(Matmul, VecmatMatchesMatmulBitForBit) {
  Rng rng(3);
  const auto a = random_matrix(rng, 1, 7).cast<float>();
  const auto b = random_matrix(rng, 7, 5).cast<float>();
  const auto m = matmul(a, b);
  const auto v = vecmat<float>(a.row(0), b);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m(0, j), v[j]);
}

TEST(Softmax, Examples) {
  const auto half = softmax(std::vector<double>{0, 0});
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);
  for (double c : {-300.0, 0.0, 7.5, 1e4}) {
    for (double p : softmax(std::vector<double>{c, c, c, c})) EXPECT_DOUBLE_EQ(p, 0.25);
  }
  EXPECT_THROW(softmax(std::vector<double>{}), DimensionError);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const auto p = softmax(std::vector<float>{1000.0f, 0.0f});
  // exp(-1000) underflows to 0 even in double.
  EXPECT_TRUE(std::isfinite(p[0]));
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], std::exp(-1000.0), 1e-300);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> v(1 + rng.below(40));
    for (auto& x : v) x = static_cast<float>(rng.normal() * 5);
    const auto p = softmax(v);
    double s = 0;
    for (float x : p) {
      EXPECT_GT(x, 0.0f);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
    const float c = static_cast<float>(rng.normal() * 10);
    auto shifted = v;
    for (auto& x : shifted) x += c;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-6);
  }
}

TEST(Argmax, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_token(std::vector<double>{0.5, 0.5, 0.1}), 0);
  EXPECT_EQ(argmax_token(std::vector<double>{0, 0, 9}), 2);
  EXPECT_EQ(argmax_token(std::vector<double>{3, 3, 3, 3}), 0);
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<double> one_hot(6, 0.0);
    one_hot[i] = 1.0;
    EXPECT_EQ(argmax_token(one_hot), static_cast<TokenId>(i));
  }
  EXPECT_THROW(argmax_token(std::vector<double>{}), DimensionError);
}

TEST(Argmax, InvariantUnderShiftAndPositiveScale) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(2 + rng.below(30));
    for (auto& x : v) x = rng.normal();
    const TokenId a = argmax_token(v);
    auto w = v;
    const double c = rng.normal() * 3, k = 0.1 + rng.uniform() * 5;
    for (auto& x : w) x = x * k + c;
    EXPECT_EQ(argmax_token(w), a);
  }
}

TEST(RmsNorm, Examples) {
  const std::vector<double> ones(5, 1.0);
  const std::vector<double> c(5, 3.0);
  for (double y : rmsnorm<double>(c, ones, 0.0)) EXPECT_DOUBLE_EQ(y, 1.0);
  const std::vector<double> zeros(5, 0.0);
  const std::vector<double> scale{1, 2, 3, 4, 5};
  for (double y : rmsnorm<double>(zeros, scale)) EXPECT_EQ(y, 0.0);
  EXPECT_THROW(rmsnorm<double>(zeros, std::vector<double>(4, 1.0)), DimensionError);
}

TEST(RmsNorm, MatchesDirectFormula) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(1 + rng.below(32)), s(x.size());
    for (auto& v : x) v = rng.normal() * 3;
    for (auto& v : s) v = rng.normal();
    const auto y = rmsnorm<double>(x, s);
    const auto ref = ktest::ref::norm(x, s);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Rope, PositionZeroIsIdentity) {
  Rng rng(7);
  std::vector<double> v(16);
  for (auto& x : v) x = rng.normal();
  EXPECT_EQ(rope<double>(v, 8, 0, 10000.0), v);
}

TEST(Rope, HeadDimTwoRotatesByPositionRadians) {
  const std::vector<double> v{1.0, 0.0};
  const auto r = rope<double>(v, 2, 1, 10000.0);
  EXPECT_NEAR(r[0], std::cos(1.0), 1e-15);
  EXPECT_NEAR(r[1], std::sin(1.0), 1e-15);
  const auto r3 = rope<double>(std::vector<double>{0.3, -0.7}, 2, 3, 10000.0);
  EXPECT_NEAR(r3[0], 0.3 * std::cos(3.0) + 0.7 * std::sin(3.0), 1e-15);
  EXPECT_NEAR(r3[1], 0.3 * std::sin(3.0) - 0.7 * std::cos(3.0), 1e-15);
}

TEST(Rope, PreservesPairNorms) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> v(32);
    for (auto& x : v) x = static_cast<float>(rng.normal() * 4);
    const std::size_t pos = rng.below(4096);
    const auto r = rope<float>(v, 8, pos, 10000.0);
    for (std::size_t i = 0; i < v.size(); i += 2) {
      const double before = std::hypot(double(v[i]), double(v[i + 1]));
      const double after = std::hypot(double(r[i]), double(r[i + 1]));
      EXPECT_NEAR(after, before, 1e-6 * std::max(1.0, before));
    }
  }
}

TEST(Rope, MatchesComplexOracleAndInverts) {
  Rng rng(9);
  std::vector<double> v(24);
  for (auto& x : v) x = rng.normal();
  const auto r = rope<double>(v, 8, 37, 500.0);
  const auto ref = ktest::ref::rotate(v, 8, 37, 500.0);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(r[i], ref[i], 1e-12);
  auto back = r;
  rope_inplace<double>(back, 8, 37, 500.0, -1);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back[i], v[i], 1e-12);
}

TEST(Rope, OddHeadDimIsConfigError) {
  std::vector<double> v(6, 1.0);
  EXPECT_THROW(rope<double>(v, 3, 1, 10000.0), ConfigError);
}

namespace {

AttentionParams<double> random_attention(Rng& rng, std::size_t heads, std::size_t hd) {
  const std::size_t d = heads * hd;
  AttentionParams<double> p;
  p.n_heads = heads;
  p.head_dim = hd;
  p.wq = random_matrix(rng, d, d);
  p.wk = random_matrix(rng, d, d);
  p.wv = random_matrix(rng, d, d);
  p.wo = random_matrix(rng, d, d);
  for (auto* m : {&p.wq, &p.wk, &p.wv, &p.wo})
    for (auto& x : m->data) x /= std::sqrt(static_cast<double>(d));
  return p;
}

}  // namespace

TEST(Attention, ZeroWeightsGiveZeroOutput) {
  AttentionParams<double> p;
  p.n_heads = 2;
  p.head_dim = 4;
  p.wq = p.wk = p.wv = p.wo = Matrix<double>(8, 8);
  Rng rng(10);
  KVStore<double> cache(16, 8);
  const auto out = causal_attention(p, random_matrix(rng, 5, 8), cache, 0, 10000.0);
  for (double x : out.data) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(cache.length(), 5u);
}

TEST(Attention, SingleHeadHandOracle) {
  // Identity projections, head_dim 2, three positions. The last row must be
  // the softmax(q.k / sqrt(2))-weighted mean of the values.
  AttentionParams<double> p;
  p.n_heads = 1;
  p.head_dim = 2;
  p.wq = p.wk = p.wv = p.wo = Matrix<double>::identity(2);
  const Matrix<double> x{{1.0, 0.0}, {0.0, 1.0}, {0.5, 0.5}};
  KVStore<double> cache(8, 2);
  const auto out = causal_attention(p, x, cache, 0, 10000.0);

  std::vector<std::vector<double>> k;
  for (std::size_t t = 0; t < 3; ++t) {
    const double a = static_cast<double>(t);
    k.push_back({x(t, 0) * std::cos(a) - x(t, 1) * std::sin(a), x(t, 0) * std::sin(a) + x(t, 1) * std::cos(a)});
  }
  const auto& q = k[2];
  double w[3], z = 0;
  for (int s = 0; s < 3; ++s) z += (w[s] = std::exp((q[0] * k[s][0] + q[1] * k[s][1]) / std::sqrt(2.0)));
  for (int j = 0; j < 2; ++j) {
    double expect = 0;
    for (int s = 0; s < 3; ++s) expect += w[s] / z * x(s, j);
    EXPECT_NEAR(out(2, j), expect, 1e-14);
  }
  // First row attends only to itself.
  EXPECT_NEAR(out(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(out(0, 1), 0.0, 1e-15);
}

TEST(Attention, MatchesFullRecomputeOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_attention(rng, 2, 4);
    const std::size_t T = 1 + rng.below(32);
    const auto x = random_matrix(rng, T, 8);
    KVStore<double> cache(T, 8);
    const auto out = causal_attention(p, x, cache, 0, 10000.0);
    ktest::ref::Mat xs;
    for (std::size_t t = 0; t < T; ++t) xs.push_back(ktest::ref::row_of(x, t));
    const auto ref = ktest::ref::attention(p, xs, 10000.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out(t, j), ref[t][j], 1e-10);
  }
}

template <typename Real>
double incremental_vs_batch(std::uint64_t seed, std::size_t T) {
  Rng rng(seed);
  const auto p = random_attention(rng, 2, 4).template cast<Real>();
  const auto x = random_matrix(rng, T, 8).template cast<Real>();
  KVStore<Real> batch_cache(T, 8), step_cache(T, 8);
  const auto batch = causal_attention(p, x, batch_cache, 0, 10000.0);
  double worst = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto one = causal_attention(p, x.slice_rows(t, t + 1), step_cache, t, 10000.0);
    for (std::size_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(double(one(0, j)) - double(batch(t, j))));
  }
  return worst;
}

TEST(Attention, IncrementalEqualsBatch) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LE(incremental_vs_batch<float>(seed, 32), 1e-4);
    EXPECT_LE(incremental_vs_batch<double>(seed, 32), 1e-10);
  }
  // The kernels compute rows independently, so the match is in fact exact.
  EXPECT_EQ(incremental_vs_batch<float>(99, 8), 0.0);
}

TEST(Attention, CacheLengthMismatchThrows) {
  Rng rng(12);
  const auto p = random_attention(rng, 2, 4);
  KVStore<double> cache(8, 8);
  EXPECT_THROW(causal_attention(p, random_matrix(rng, 2, 8), cache, 1, 10000.0), CacheError);
  KVStore<double> tiny(2, 8);
  EXPECT_THROW(causal_attention(p, random_matrix(rng, 3, 8), tiny, 0, 10000.0), CapacityError);
}

TEST(KVStore, TruncateAndAppend) {
  KVStore<float> s(4, 2);
  const std::vector<float> k{1, 2}, v{3, 4};
  s.append(k, v);
  s.append(v, k);
  EXPECT_EQ(s.length(), 2u);
  s.truncate(1);
  EXPECT_EQ(s.length(), 1u);
  EXPECT_EQ(s.key(0)[1], 2.0f);
  EXPECT_THROW(s.truncate(3), CacheError);
}

TEST(Rng, DeterministicAndForksDiffer) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42).fork("x").next_u64(), Rng(42).fork("y").next_u64());
  EXPECT_NE(Rng(42).fork(0).next_u64(), Rng(42).fork(1).next_u64());
  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
    EXPECT_LT(u.below(13), 13u);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}
