#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "kangaroo/adapter.hpp"
#include "kangaroo/errors.hpp"
#include "kangaroo/numerics.hpp"

namespace kangaroo {

// One training sequence: layer-l features for positions 0..T-1 and the
// frozen target's next-token distribution at each of them.
template <typename Real>
struct DistillBatch {
  Matrix<Real> early_features;  // T x d
  Matrix<Real> teacher_probs;   // T x V

  void validate(Real tol = Real(1e-5)) const {
    if (early_features.rows != teacher_probs.rows) throw DimensionError("distill batch: row count mismatch");
    for (std::size_t t = 0; t < teacher_probs.rows; ++t) {
      Real s = 0;
      for (Real p : teacher_probs.row(t)) s += p;
      if (std::abs(s - Real(1)) > tol) throw DomainError("teacher row " + std::to_string(t) + " sums to " + std::to_string(s));
    }
  }
};

template <typename Real>
struct AdapterGradient {
  Real loss = 0;
  AdapterWeights<Real> grads;  // same layout as the adapter; target tensors never appear
};

template <typename Real>
Matrix<Real> transpose(const Matrix<Real>& m) {
  Matrix<Real> t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

template <typename Real>
AdapterWeights<Real> zero_like(const AdapterWeights<Real>& a) {
  AdapterWeights<Real> z;
  z.input_norm.assign(a.input_norm.size(), Real(0));
  z.output_norm.assign(a.output_norm.size(), Real(0));
  z.attention.n_heads = a.attention.n_heads;
  z.attention.head_dim = a.attention.head_dim;
  const std::size_t d = a.attention.width();
  z.attention.wq = z.attention.wk = z.attention.wv = z.attention.wo = Matrix<Real>(d, d);
  return z;
}

namespace detail {

// Backward of y = scale .* x * r with r = (mean(x^2) + eps)^-1/2, for one row.
// Accumulates into dscale and writes dx.
template <typename Real>
void rmsnorm_backward_row(std::span<const Real> x, std::span<const Real> scale, Real inv_rms, std::span<const Real> dy,
                          std::span<Real> dscale, std::span<Real> dx) {
  const std::size_t d = x.size();
  Real dot = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dscale[i] += dy[i] * x[i] * inv_rms;
    dot += dy[i] * scale[i] * x[i];
  }
  const Real r3 = inv_rms * inv_rms * inv_rms / static_cast<Real>(d);
  for (std::size_t i = 0; i < d; ++i) dx[i] = inv_rms * scale[i] * dy[i] - r3 * x[i] * dot;
}

template <typename Real>
Real inv_rms(std::span<const Real> x) {
  Real ss = 0;
  for (Real v : x) ss += v * v;
  return Real(1) / std::sqrt(ss / static_cast<Real>(x.size()) + static_cast<Real>(kNormEps));
}

}  // namespace detail

// Analytic gradient of distill_loss(adapter_forward(features) * lm_head,
// teacher) with respect to every adapter parameter. The sequence occupies
// positions 0..T-1 with an empty cache; lm_head is treated as a constant.
template <typename Real>
AdapterGradient<Real> adapter_backward(const AdapterWeights<Real>& adapter, const Matrix<Real>& lm_head,
                                       const DistillBatch<Real>& batch, double rope_theta) {
  const Matrix<Real>& x = batch.early_features;
  const std::size_t T = x.rows, d = x.cols;
  const std::size_t H = adapter.attention.n_heads, hd = adapter.attention.head_dim;
  if (d != adapter.d_model() || lm_head.rows != d || batch.teacher_probs.cols != lm_head.cols || batch.teacher_probs.rows != T) {
    throw DimensionError("adapter_backward: shape mismatch");
  }
  const auto& att = adapter.attention;

  // Forward with saved intermediates.
  std::vector<Real> r_in(T), r_out(T);
  Matrix<Real> u(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    r_in[t] = detail::inv_rms<Real>(x.row(t));
    for (std::size_t i = 0; i < d; ++i) u(t, i) = adapter.input_norm[i] * (x(t, i) * r_in[t]);
  }
  Matrix<Real> q = matmul(u, att.wq), k = matmul(u, att.wk);
  const Matrix<Real> v = matmul(u, att.wv);
  for (std::size_t t = 0; t < T; ++t) {
    rope_inplace<Real>(q.row(t), hd, t, rope_theta);
    rope_inplace<Real>(k.row(t), hd, t, rope_theta);
  }
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  // probs[h][t][s] for s <= t
  std::vector<Matrix<Real>> probs(H, Matrix<Real>(T, T));
  Matrix<Real> mixed(T, d);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < T; ++t) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        Real dot = 0;
        for (std::size_t i = 0; i < hd; ++i) dot += q(t, off + i) * k(s, off + i);
        probs[h](t, s) = dot * scale;
        mx = std::max(mx, probs[h](t, s));
      }
      Real sum = 0;
      for (std::size_t s = 0; s <= t; ++s) {
        probs[h](t, s) = std::exp(probs[h](t, s) - mx);
        sum += probs[h](t, s);
      }
      for (std::size_t s = 0; s <= t; ++s) {
        probs[h](t, s) /= sum;
        for (std::size_t i = 0; i < hd; ++i) mixed(t, off + i) += probs[h](t, s) * v(s, off + i);
      }
    }
  }
  Matrix<Real> resid = x;
  add_inplace(resid, matmul(mixed, att.wo));
  Matrix<Real> y(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    r_out[t] = detail::inv_rms<Real>(resid.row(t));
    for (std::size_t i = 0; i < d; ++i) y(t, i) = adapter.output_norm[i] * (resid(t, i) * r_out[t]);
  }
  const Matrix<Real> logits = matmul(y, lm_head);

  AdapterGradient<Real> out;
  out.loss = distill_loss(logits, batch.teacher_probs);
  out.grads = zero_like(adapter);
  auto& g = out.grads;

  // Head (frozen) and output norm.
  const Matrix<Real> dlogits = distill_loss_grad(logits, batch.teacher_probs);
  const Matrix<Real> dy = matmul(dlogits, transpose(lm_head));
  Matrix<Real> dresid(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    detail::rmsnorm_backward_row<Real>(resid.row(t), adapter.output_norm, r_out[t], dy.row(t), g.output_norm, dresid.row(t));
  }

  // Output projection; the residual branch ends at the (constant) features.
  g.attention.wo = matmul(transpose(mixed), dresid);
  const Matrix<Real> dmixed = matmul(dresid, transpose(att.wo));

  Matrix<Real> dq(T, d), dk(T, d), dv(T, d);
  std::vector<Real> dp(T);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < T; ++t) {
      Real weighted = 0;
      for (std::size_t s = 0; s <= t; ++s) {
        Real dot = 0;
        for (std::size_t i = 0; i < hd; ++i) {
          dot += dmixed(t, off + i) * v(s, off + i);
          dv(s, off + i) += probs[h](t, s) * dmixed(t, off + i);
        }
        dp[s] = dot;
        weighted += probs[h](t, s) * dot;
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const Real dscore = probs[h](t, s) * (dp[s] - weighted) * scale;
        for (std::size_t i = 0; i < hd; ++i) {
          dq(t, off + i) += dscore * k(s, off + i);
          dk(s, off + i) += dscore * q(t, off + i);
        }
      }
    }
  }
  // Rotary embedding is orthogonal: its adjoint is the inverse rotation.
  for (std::size_t t = 0; t < T; ++t) {
    rope_inplace<Real>(dq.row(t), hd, t, rope_theta, -1);
    rope_inplace<Real>(dk.row(t), hd, t, rope_theta, -1);
  }
  const Matrix<Real> ut = transpose(u);
  g.attention.wq = matmul(ut, dq);
  g.attention.wk = matmul(ut, dk);
  g.attention.wv = matmul(ut, dv);

  Matrix<Real> du = matmul(dq, transpose(att.wq));
  add_inplace(du, matmul(dk, transpose(att.wk)));
  add_inplace(du, matmul(dv, transpose(att.wv)));
  std::vector<Real> unused(d);
  for (std::size_t t = 0; t < T; ++t) {
    detail::rmsnorm_backward_row<Real>(x.row(t), adapter.input_norm, r_in[t], du.row(t), g.input_norm, unused);
  }
  return out;
}

// Visits every adapter tensor in a fixed order: input_norm, wq, wk, wv, wo,
// output_norm. Used by the optimizer and by tests that sweep coordinates.
template <typename Real, typename Fn>
void for_each_tensor(AdapterWeights<Real>& a, Fn&& fn) {
  fn(std::span<Real>(a.input_norm), false);
  fn(std::span<Real>(a.attention.wq.data), true);
  fn(std::span<Real>(a.attention.wk.data), true);
  fn(std::span<Real>(a.attention.wv.data), true);
  fn(std::span<Real>(a.attention.wo.data), true);
  fn(std::span<Real>(a.output_norm), false);
}

}  // namespace kangaroo
