#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "kangaroo/errors.hpp"

namespace kangaroo {

using TokenId = std::int32_t;

inline constexpr double kNormEps = 1e-5;

// Dense row-major matrix. Every kernel below computes each output row from
// the matching input row with a fixed loop order, so a row's bits never
// depend on how many other rows share the call. Batched verification and
// one-token-at-a-time decoding therefore agree exactly.
template <typename Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = Real(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::initializer_list<std::initializer_list<Real>> init) {
    rows = init.size();
    cols = rows ? init.begin()->size() : 0;
    data.reserve(rows * cols);
    for (const auto& r : init) {
      if (r.size() != cols) throw DimensionError("ragged matrix initializer");
      data.insert(data.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = Real(1);
    return m;
  }

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<Real> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const Real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](Real v) { return std::isfinite(v); });
  }

  bool operator==(const Matrix&) const = default;

  template <typename To>
  Matrix<To> cast() const {
    Matrix<To> out(rows, cols);
    std::transform(data.begin(), data.end(), out.data.begin(), [](Real v) { return static_cast<To>(v); });
    return out;
  }

  // Copies rows [begin, end).
  Matrix slice_rows(std::size_t begin, std::size_t end) const {
    Matrix out(end - begin, cols);
    std::copy(data.begin() + begin * cols, data.begin() + end * cols, out.data.begin());
    return out;
  }
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename Real>
Matrix<Real> matmul(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: " + shape_str(a.rows, a.cols) + " times " + shape_str(b.rows, b.cols));
  }
  Matrix<Real> out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    Real* o = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const Real aik = a(i, k);
      const Real* br = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

// Single row times matrix; same accumulation order as matmul.
template <typename Real>
std::vector<Real> vecmat(std::span<const Real> x, const Matrix<Real>& b) {
  if (x.size() != b.rows) throw DimensionError("vecmat: length " + std::to_string(x.size()) + " vs " + shape_str(b.rows, b.cols));
  std::vector<Real> out(b.cols, Real(0));
  for (std::size_t k = 0; k < b.rows; ++k) {
    const Real xk = x[k];
    const Real* br = b.data.data() + k * b.cols;
    for (std::size_t j = 0; j < b.cols; ++j) out[j] += xk * br[j];
  }
  return out;
}

template <typename Real>
std::vector<Real> softmax(std::span<const Real> v) {
  if (v.empty()) throw DimensionError("softmax of empty vector");
  const Real mx = *std::max_element(v.begin(), v.end());
  std::vector<Real> out(v.size());
  Real sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (auto& x : out) x /= sum;
  return out;
}

template <typename Real>
std::vector<Real> softmax(const std::vector<Real>& v) {
  return softmax(std::span<const Real>(v));
}

template <typename Real>
  requires(!std::is_const_v<Real>)
std::vector<Real> softmax(std::span<Real> v) {
  return softmax(std::span<const Real>(v));
}

// Ties resolve to the lowest index.
template <typename Real>
TokenId argmax_token(std::span<const Real> logits) {
  if (logits.empty()) throw DimensionError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

template <typename Real>
TokenId argmax_token(const std::vector<Real>& logits) {
  return argmax_token(std::span<const Real>(logits));
}

template <typename Real>
  requires(!std::is_const_v<Real>)
TokenId argmax_token(std::span<Real> logits) {
  return argmax_token(std::span<const Real>(logits));
}

template <typename Real>
void rmsnorm_into(std::span<const Real> x, std::span<const Real> scale, std::span<Real> out, double eps = kNormEps) {
  if (x.size() != scale.size() || out.size() != x.size()) {
    throw DimensionError("rmsnorm: length " + std::to_string(x.size()) + " vs scale " + std::to_string(scale.size()));
  }
  Real ss = 0;
  for (Real v : x) ss += v * v;
  const Real inv = Real(1) / std::sqrt(ss / static_cast<Real>(x.size()) + static_cast<Real>(eps));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = scale[i] * (x[i] * inv);
}

template <typename Real>
std::vector<Real> rmsnorm(std::span<const Real> x, std::span<const Real> scale, double eps = kNormEps) {
  std::vector<Real> out(x.size());
  rmsnorm_into<Real>(x, scale, out, eps);
  return out;
}

template <typename Real>
Matrix<Real> rmsnorm_rows(const Matrix<Real>& x, const std::vector<Real>& scale, double eps = kNormEps) {
  Matrix<Real> out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) rmsnorm_into<Real>(x.row(r), scale, out.row(r), eps);
  return out;
}

// Rotary embedding applied in place to a d-wide row holding n_heads
// consecutive head slices. Pair (2i, 2i+1) inside each head rotates by
// position * theta^(-2i/head_dim). `sign = -1` applies the inverse rotation.
template <typename Real>
void rope_inplace(std::span<Real> row, std::size_t head_dim, std::size_t position, double theta, int sign = 1) {
  if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("rope requires an even head_dim, got " + std::to_string(head_dim));
  if (row.size() % head_dim != 0) throw DimensionError("rope: row width not a multiple of head_dim");
  const std::size_t half = head_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(position) * freq * sign;
    const Real c = static_cast<Real>(std::cos(angle));
    const Real s = static_cast<Real>(std::sin(angle));
    for (std::size_t h = 0; h < row.size(); h += head_dim) {
      Real& a = row[h + 2 * i];
      Real& b = row[h + 2 * i + 1];
      const Real x0 = a;
      const Real x1 = b;
      a = x0 * c - x1 * s;
      b = x0 * s + x1 * c;
    }
  }
}

template <typename Real>
std::vector<Real> rope(std::span<const Real> v, std::size_t head_dim, std::size_t position, double theta) {
  std::vector<Real> out(v.begin(), v.end());
  rope_inplace<Real>(out, head_dim, position, theta);
  return out;
}

template <typename Real>
struct AttentionParams {
  Matrix<Real> wq, wk, wv, wo;  // each d x d, applied as x * W
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;

  std::size_t width() const { return n_heads * head_dim; }

  void validate() const {
    const std::size_t d = width();
    for (const Matrix<Real>* m : {&wq, &wk, &wv, &wo}) {
      if (m->rows != d || m->cols != d) throw DimensionError("attention projection must be " + shape_str(d, d));
    }
  }

  template <typename To>
  AttentionParams<To> cast() const {
    return {wq.template cast<To>(), wk.template cast<To>(), wv.template cast<To>(), wo.template cast<To>(), n_heads, head_dim};
  }

  bool operator==(const AttentionParams&) const = default;
};

// Keys (post-rope) and values for one attention block, preallocated to a
// fixed capacity. Truncation is a length change; stale rows are
// overwritten by later appends.
template <typename Real>
class KVStore {
 public:
  KVStore() = default;
  KVStore(std::size_t capacity, std::size_t width) : keys_(capacity, width), values_(capacity, width) {}

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return keys_.rows; }
  std::size_t width() const { return keys_.cols; }

  std::span<const Real> key(std::size_t pos) const { return keys_.row(pos); }
  std::span<const Real> value(std::size_t pos) const { return values_.row(pos); }

  void append(std::span<const Real> k, std::span<const Real> v) {
    if (length_ >= capacity()) throw CapacityError("kv store full at " + std::to_string(capacity()) + " positions");
    std::copy(k.begin(), k.end(), keys_.row(length_).begin());
    std::copy(v.begin(), v.end(), values_.row(length_).begin());
    ++length_;
  }

  void truncate(std::size_t to_length) {
    if (to_length > length_) {
      throw CacheError("cannot truncate kv store of length " + std::to_string(length_) + " to " + std::to_string(to_length));
    }
    length_ = to_length;
  }

 private:
  Matrix<Real> keys_;
  Matrix<Real> values_;
  std::size_t length_ = 0;
};

// Causal multi-head attention over `inputs` (already normalized), which
// occupy positions start_pos .. start_pos + T - 1. Appends T entries to
// `cache` and returns the projected output (before any residual).
template <typename Real>
Matrix<Real> causal_attention(const AttentionParams<Real>& p, const Matrix<Real>& inputs, KVStore<Real>& cache,
                              std::size_t start_pos, double rope_theta) {
  const std::size_t d = p.width();
  if (inputs.cols != d) throw DimensionError("attention input width " + std::to_string(inputs.cols) + " != " + std::to_string(d));
  if (inputs.rows == 0) throw DimensionError("attention over zero rows");
  if (cache.length() != start_pos) {
    throw CacheError("attention cache holds " + std::to_string(cache.length()) + " positions, expected " + std::to_string(start_pos));
  }
  if (start_pos + inputs.rows > cache.capacity()) {
    throw CapacityError("attention would exceed capacity " + std::to_string(cache.capacity()));
  }

  Matrix<Real> q = matmul(inputs, p.wq);
  Matrix<Real> k = matmul(inputs, p.wk);
  const Matrix<Real> v = matmul(inputs, p.wv);
  for (std::size_t t = 0; t < inputs.rows; ++t) {
    rope_inplace<Real>(q.row(t), p.head_dim, start_pos + t, rope_theta);
    rope_inplace<Real>(k.row(t), p.head_dim, start_pos + t, rope_theta);
    cache.append(k.row(t), v.row(t));
  }

  const Real scale = Real(1) / std::sqrt(static_cast<Real>(p.head_dim));
  Matrix<Real> mixed(inputs.rows, d);
  std::vector<Real> weights;
  for (std::size_t t = 0; t < inputs.rows; ++t) {
    const std::size_t span_len = start_pos + t + 1;
    weights.resize(span_len);
    for (std::size_t h = 0; h < p.n_heads; ++h) {
      const std::size_t off = h * p.head_dim;
      const Real* qh = q.row(t).data() + off;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t s = 0; s < span_len; ++s) {
        const Real* kh = cache.key(s).data() + off;
        Real dot = 0;
        for (std::size_t i = 0; i < p.head_dim; ++i) dot += qh[i] * kh[i];
        weights[s] = dot * scale;
        mx = std::max(mx, weights[s]);
      }
      Real sum = 0;
      for (std::size_t s = 0; s < span_len; ++s) {
        weights[s] = std::exp(weights[s] - mx);
        sum += weights[s];
      }
      Real* out = mixed.row(t).data() + off;
      for (std::size_t s = 0; s < span_len; ++s) {
        const Real w = weights[s] / sum;
        const Real* vh = cache.value(s).data() + off;
        for (std::size_t i = 0; i < p.head_dim; ++i) out[i] += w * vh[i];
      }
    }
  }
  return matmul(mixed, p.wo);
}

template <typename Real>
Real silu(Real x) {
  return x / (Real(1) + std::exp(-x));
}

// (silu(x * gate) .* (x * up)) * down
template <typename Real>
Matrix<Real> gated_ffn(const Matrix<Real>& x, const Matrix<Real>& gate, const Matrix<Real>& up, const Matrix<Real>& down) {
  Matrix<Real> g = matmul(x, gate);
  const Matrix<Real> u = matmul(x, up);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = silu(g.data[i]) * u.data[i];
  return matmul(g, down);
}

template <typename Real>
void add_inplace(Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("add: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

template <typename Real>
std::vector<Real> cast_vec(const auto& v) {
  return std::vector<Real>(v.begin(), v.end());
}

}  // namespace kangaroo
