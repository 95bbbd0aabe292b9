#pragma once

// Shared fixtures and independent oracles for the test suites. The
// reference transformer below recomputes everything from the weights with
// plain loops in double: no caches, no library kernels.

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "kangaroo/kangaroo.hpp"

namespace ktest {

using namespace kangaroo;

inline ModelConfig small_config(std::size_t layers = 4, std::size_t exit_layer = 1) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.n_layers = layers;
  c.ffn_hidden = 24;
  c.exit_layer = exit_layer;
  c.max_seq_len = 128;
  return c;
}

inline std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(vocab));
  return t;
}

namespace ref {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

template <typename Real>
Vec row_of(const Matrix<Real>& m, std::size_t r) {
  Vec v(m.cols);
  for (std::size_t j = 0; j < m.cols; ++j) v[j] = static_cast<double>(m(r, j));
  return v;
}

template <typename Real>
Vec times(const Vec& x, const Matrix<Real>& w) {
  Vec out(w.cols, 0.0);
  for (std::size_t j = 0; j < w.cols; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < w.rows; ++k) s += x[k] * static_cast<double>(w(k, j));
    out[j] = s;
  }
  return out;
}

template <typename Real>
Vec norm(const Vec& x, const std::vector<Real>& scale) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(scale[i]) * x[i] / std::sqrt(ms + 1e-5);
  return out;
}

// Rotation written with complex numbers, independent of the kernel.
inline Vec rotate(const Vec& x, std::size_t head_dim, std::size_t pos, double theta) {
  Vec out(x.size());
  for (std::size_t h = 0; h < x.size(); h += head_dim) {
    for (std::size_t i = 0; i < head_dim / 2; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const std::complex<double> z(x[h + 2 * i], x[h + 2 * i + 1]);
      const std::complex<double> r = z * std::polar(1.0, static_cast<double>(pos) * freq);
      out[h + 2 * i] = r.real();
      out[h + 2 * i + 1] = r.imag();
    }
  }
  return out;
}

template <typename Real>
Mat attention(const AttentionParams<Real>& p, const Mat& xs, double theta) {
  const std::size_t T = xs.size(), d = p.width();
  Mat q(T), k(T), v(T), out(T, Vec(d, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    q[t] = rotate(times(xs[t], p.wq), p.head_dim, t, theta);
    k[t] = rotate(times(xs[t], p.wk), p.head_dim, t, theta);
    v[t] = times(xs[t], p.wv);
  }
  for (std::size_t t = 0; t < T; ++t) {
    Vec mixed(d, 0.0);
    for (std::size_t h = 0; h < p.n_heads; ++h) {
      const std::size_t o = h * p.head_dim;
      Vec score(t + 1);
      double mx = -1e300;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t i = 0; i < p.head_dim; ++i) dot += q[t][o + i] * k[s][o + i];
        score[s] = dot / std::sqrt(static_cast<double>(p.head_dim));
        mx = std::max(mx, score[s]);
      }
      double z = 0.0;
      for (auto& s : score) z += (s = std::exp(s - mx));
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t i = 0; i < p.head_dim; ++i) mixed[o + i] += score[s] / z * v[s][o + i];
    }
    out[t] = times(mixed, p.wo);
  }
  return out;
}

template <typename Real>
Mat block(const LayerWeights<Real>& l, const Mat& xs, double theta) {
  Mat normed;
  for (const auto& x : xs) normed.push_back(norm(x, l.attn_norm));
  const Mat a = attention(l.attn, normed, theta);
  Mat out = xs;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    for (std::size_t i = 0; i < out[t].size(); ++i) out[t][i] += a[t][i];
    const Vec n = norm(out[t], l.ffn_norm);
    const Vec g = times(n, l.gate), u = times(n, l.up);
    Vec act(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) act[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
    const Vec f = times(act, l.down);
    for (std::size_t i = 0; i < out[t].size(); ++i) out[t][i] += f[i];
  }
  return out;
}

template <typename Real>
Mat embed(const TargetWeights<Real>& w, const std::vector<TokenId>& tokens) {
  Mat xs;
  for (TokenId t : tokens) xs.push_back(row_of(w.token_embedding, static_cast<std::size_t>(t)));
  return xs;
}

// Hidden state after `layers` blocks, for every position.
template <typename Real>
Mat hidden(const TargetWeights<Real>& w, const std::vector<TokenId>& tokens, std::size_t layers) {
  Mat xs = embed(w, tokens);
  for (std::size_t i = 0; i < layers; ++i) xs = block(w.layers[i], xs, w.config.rope_theta);
  return xs;
}

template <typename Real>
Mat logits(const TargetWeights<Real>& w, const std::vector<TokenId>& tokens) {
  Mat out;
  for (const auto& h : hidden(w, tokens, w.config.n_layers)) out.push_back(times(norm(h, w.final_norm), w.lm_head));
  return out;
}

// Draft logits from the adapter at every position of `tokens`.
template <typename Real>
Mat draft_logits(const TargetWeights<Real>& w, const AdapterWeights<Real>& a, const std::vector<TokenId>& tokens) {
  const Mat f = hidden(w, tokens, w.config.exit_layer);
  Mat normed;
  for (const auto& x : f) normed.push_back(norm(x, a.input_norm));
  const Mat att = attention(a.attention, normed, w.config.rope_theta);
  Mat out;
  for (std::size_t t = 0; t < f.size(); ++t) {
    Vec h = f[t];
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += att[t][i];
    out.push_back(times(norm(h, a.output_norm), w.lm_head));
  }
  return out;
}

inline TokenId argmax(const Vec& v) {
  std::size_t b = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[b]) b = i;
  return static_cast<TokenId>(b);
}

}  // namespace ref

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("kangaroo_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace ktest
