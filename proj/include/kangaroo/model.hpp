#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "kangaroo/errors.hpp"
#include "kangaroo/numerics.hpp"
#include "kangaroo/rng.hpp"

namespace kangaroo {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t n_layers = 8;
  std::size_t ffn_hidden = 172;
  std::size_t exit_layer = 2;
  double rope_theta = 10000.0;
  std::size_t max_seq_len = 512;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (d_model == 0 || n_heads * head_dim != d_model) throw ConfigError("d_model must equal n_heads * head_dim");
    if (head_dim % 2 != 0) throw ConfigError("head_dim must be even for rotary embedding");
    if (exit_layer < 1 || exit_layer >= n_layers) {
      throw ConfigError("exit layer must satisfy 1 <= l < L (l=" + std::to_string(exit_layer) + ", L=" + std::to_string(n_layers) + ")");
    }
    if (ffn_hidden == 0) throw ConfigError("ffn_hidden must be positive");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) throw ConfigError("rope_theta must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Real>
struct LayerWeights {
  std::vector<Real> attn_norm;
  AttentionParams<Real> attn;
  std::vector<Real> ffn_norm;
  Matrix<Real> gate;  // d x h
  Matrix<Real> up;    // d x h
  Matrix<Real> down;  // h x d

  template <typename To>
  LayerWeights<To> cast() const {
    return {cast_vec<To>(attn_norm), attn.template cast<To>(), cast_vec<To>(ffn_norm),
            gate.template cast<To>(), up.template cast<To>(), down.template cast<To>()};
  }

  bool operator==(const LayerWeights&) const = default;
};

// Frozen parameters of the full target model. Nothing in the library
// mutates these after construction.
template <typename Real>
struct TargetWeights {
  ModelConfig config;
  Matrix<Real> token_embedding;  // V x d
  std::vector<LayerWeights<Real>> layers;
  std::vector<Real> final_norm;
  Matrix<Real> lm_head;  // d x V

  template <typename To>
  TargetWeights<To> cast() const {
    TargetWeights<To> out;
    out.config = config;
    out.token_embedding = token_embedding.template cast<To>();
    for (const auto& l : layers) out.layers.push_back(l.template cast<To>());
    out.final_norm = cast_vec<To>(final_norm);
    out.lm_head = lm_head.template cast<To>();
    return out;
  }

  void validate() const {
    config.validate();
    const std::size_t d = config.d_model, h = config.ffn_hidden, v = config.vocab_size;
    auto expect = [](const Matrix<Real>& m, std::size_t r, std::size_t c, const char* what) {
      if (m.rows != r || m.cols != c || m.data.size() != r * c) {
        throw DimensionError(std::string(what) + " has shape " + shape_str(m.rows, m.cols) + ", expected " + shape_str(r, c));
      }
    };
    auto expect_vec = [](const std::vector<Real>& x, std::size_t n, const char* what) {
      if (x.size() != n) throw DimensionError(std::string(what) + " has length " + std::to_string(x.size()));
    };
    expect(token_embedding, v, d, "token_embedding");
    if (layers.size() != config.n_layers) throw DimensionError("layer count mismatch");
    for (const auto& l : layers) {
      expect_vec(l.attn_norm, d, "attn_norm");
      expect_vec(l.ffn_norm, d, "ffn_norm");
      if (l.attn.n_heads != config.n_heads || l.attn.head_dim != config.head_dim) throw DimensionError("attention head layout mismatch");
      l.attn.validate();
      expect(l.gate, d, h, "gate");
      expect(l.up, d, h, "up");
      expect(l.down, h, d, "down");
    }
    expect_vec(final_norm, d, "final_norm");
    expect(lm_head, d, v, "lm_head");
  }

  bool operator==(const TargetWeights&) const = default;
};

struct ModelInit {
  // Scale of the final norm. Larger values give a more peaked next-token
  // distribution, standing in for the confident predictions of a trained
  // model.
  double logit_gain = 4.0;
  // Standard deviation of token embeddings. Blocks add updates of roughly
  // unit scale to the residual stream, so a larger embedding keeps early
  // and final hidden states closer, the way trained models behave.
  double embedding_scale = 4.0;
  // Zero every attention/FFN projection so each block is the identity.
  bool residual_passthrough = false;
};

namespace detail {

inline Matrix<float> normal_matrix(Rng rng, std::size_t r, std::size_t c, double stddev) {
  Matrix<float> m(r, c);
  for (auto& x : m.data) x = static_cast<float>(rng.normal() * stddev);
  return m;
}

}  // namespace detail

// Deterministic synthetic target model. Values are drawn in double and
// rounded to float, so the 32- and 64-bit instantiations hold identical
// parameters and the on-disk (float) format round-trips them exactly.
template <typename Real = float>
TargetWeights<Real> gen_model(const ModelConfig& config, std::uint64_t seed, const ModelInit& init = {}) {
  config.validate();
  const Rng root(seed);
  const std::size_t d = config.d_model, h = config.ffn_hidden, v = config.vocab_size;
  const double base = 1.0 / std::sqrt(static_cast<double>(d));
  // Output projections write into the residual stream; shrink them with
  // depth as in GPT-2 style initialization.
  const double out_scale = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  TargetWeights<float> w;
  w.config = config;
  w.token_embedding = detail::normal_matrix(root.fork("embedding"), v, d, init.embedding_scale);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const Rng lr = root.fork("layer").fork(i);
    LayerWeights<float> l;
    l.attn_norm.assign(d, 1.0f);
    l.ffn_norm.assign(d, 1.0f);
    l.attn.n_heads = config.n_heads;
    l.attn.head_dim = config.head_dim;
    if (init.residual_passthrough) {
      l.attn.wq = l.attn.wk = l.attn.wv = l.attn.wo = Matrix<float>(d, d);
      l.gate = Matrix<float>(d, h);
      l.up = Matrix<float>(d, h);
      l.down = Matrix<float>(h, d);
    } else {
      l.attn.wq = detail::normal_matrix(lr.fork("wq"), d, d, base);
      l.attn.wk = detail::normal_matrix(lr.fork("wk"), d, d, base);
      l.attn.wv = detail::normal_matrix(lr.fork("wv"), d, d, base);
      l.attn.wo = detail::normal_matrix(lr.fork("wo"), d, d, out_scale);
      l.gate = detail::normal_matrix(lr.fork("gate"), d, h, base);
      l.up = detail::normal_matrix(lr.fork("up"), d, h, base);
      l.down = detail::normal_matrix(lr.fork("down"), h, d, out_scale);
    }
    w.layers.push_back(std::move(l));
  }
  w.final_norm.assign(d, static_cast<float>(init.logit_gain));
  w.lm_head = detail::normal_matrix(root.fork("lm_head"), d, v, base);
  if constexpr (std::is_same_v<Real, float>) {
    return w;
  } else {
    return w.template cast<Real>();
  }
}

// Early features for positions start .. start + rows - 1: the hidden state
// leaving the shallow sub-network, before any adapter processing.
template <typename Real>
struct EarlyFeatures {
  std::size_t start = 0;
  Matrix<Real> rows;

  std::size_t size() const { return rows.rows; }
  std::size_t end() const { return start + rows.rows; }
  std::size_t position(std::size_t i) const { return start + i; }
};

// The three incremental caches of one decoding session: shallow layers
// [0, l), deep layers [l, L) and the adapter's single attention block.
template <typename Real>
class KVCacheSet {
 public:
  KVCacheSet() = default;
  explicit KVCacheSet(const ModelConfig& c) {
    c.validate();
    for (std::size_t i = 0; i < c.exit_layer; ++i) shallow.emplace_back(c.max_seq_len, c.d_model);
    for (std::size_t i = c.exit_layer; i < c.n_layers; ++i) deep.emplace_back(c.max_seq_len, c.d_model);
    adapter = KVStore<Real>(c.max_seq_len, c.d_model);
  }

  std::size_t shallow_length() const { return shallow.front().length(); }
  std::size_t deep_length() const { return deep.front().length(); }
  std::size_t adapter_length() const { return adapter.length(); }
  std::size_t capacity() const { return adapter.capacity(); }

  void truncate_shallow(std::size_t n) {
    for (auto& s : shallow) s.truncate(n);
  }
  void truncate_deep(std::size_t n) {
    for (auto& s : deep) s.truncate(n);
  }

  // Drops every entry at or beyond `to_length` from all three caches.
  void rollback(std::size_t to_length) {
    if (to_length > shallow_length() || to_length > deep_length() || to_length > adapter_length()) {
      throw CacheError("rollback to " + std::to_string(to_length) + " exceeds cache lengths (shallow " +
                       std::to_string(shallow_length()) + ", deep " + std::to_string(deep_length()) + ", adapter " +
                       std::to_string(adapter_length()) + ")");
    }
    truncate_shallow(to_length);
    truncate_deep(to_length);
    adapter.truncate(to_length);
  }

  std::vector<KVStore<Real>> shallow;
  std::vector<KVStore<Real>> deep;
  KVStore<Real> adapter;
};

// One pre-norm decoder block: x + attn(norm(x)), then + ffn(norm(.)).
template <typename Real>
Matrix<Real> apply_layer(const LayerWeights<Real>& layer, const Matrix<Real>& x, KVStore<Real>& store, std::size_t start,
                         double rope_theta) {
  Matrix<Real> h = x;
  add_inplace(h, causal_attention(layer.attn, rmsnorm_rows(x, layer.attn_norm), store, start, rope_theta));
  add_inplace(h, gated_ffn(rmsnorm_rows(h, layer.ffn_norm), layer.gate, layer.up, layer.down));
  return h;
}

template <typename Real>
Matrix<Real> embed(const TargetWeights<Real>& w, std::span<const TokenId> tokens) {
  Matrix<Real> x(tokens.size(), w.config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TokenId id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= w.config.vocab_size) {
      throw DomainError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(w.config.vocab_size));
    }
    const auto src = w.token_embedding.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

// Final norm followed by the LM head.
template <typename Real>
Matrix<Real> hidden_to_logits(const TargetWeights<Real>& w, const Matrix<Real>& hidden) {
  return matmul(rmsnorm_rows(hidden, w.final_norm), w.lm_head);
}

inline void check_capacity(std::size_t start, std::size_t count, std::size_t max_seq_len) {
  if (start + count > max_seq_len) {
    throw CapacityError("positions up to " + std::to_string(start + count) + " exceed max_seq_len " + std::to_string(max_seq_len));
  }
}

// Embeds `tokens` (placed at start_pos onward) and runs layers [0, l).
template <typename Real>
EarlyFeatures<Real> forward_shallow(const TargetWeights<Real>& w, std::span<const TokenId> tokens, KVCacheSet<Real>& cache,
                                    std::size_t start_pos) {
  if (cache.shallow_length() != start_pos) {
    throw CacheError("shallow cache holds " + std::to_string(cache.shallow_length()) + " positions, tokens start at " +
                     std::to_string(start_pos));
  }
  check_capacity(start_pos, tokens.size(), w.config.max_seq_len);
  Matrix<Real> x = embed(w, tokens);
  for (std::size_t i = 0; i < w.config.exit_layer; ++i) {
    x = apply_layer(w.layers[i], x, cache.shallow[i], start_pos, w.config.rope_theta);
  }
  return {start_pos, std::move(x)};
}

// Runs layers [l, L), final norm and LM head over a contiguous block of
// early features. One logits row per feature.
template <typename Real>
Matrix<Real> forward_remaining(const TargetWeights<Real>& w, const EarlyFeatures<Real>& features, KVCacheSet<Real>& cache) {
  if (features.start != cache.deep_length()) {
    throw CacheError("features start at " + std::to_string(features.start) + " but deep cache holds " +
                     std::to_string(cache.deep_length()));
  }
  check_capacity(features.start, features.size(), w.config.max_seq_len);
  Matrix<Real> x = features.rows;
  for (std::size_t i = w.config.exit_layer; i < w.config.n_layers; ++i) {
    x = apply_layer(w.layers[i], x, cache.deep[i - w.config.exit_layer], features.start, w.config.rope_theta);
  }
  return hidden_to_logits(w, x);
}

// Single pass over all L layers without exposing the split.
template <typename Real>
Matrix<Real> full_forward(const TargetWeights<Real>& w, std::span<const TokenId> tokens, KVCacheSet<Real>& cache,
                          std::size_t start_pos) {
  if (cache.shallow_length() != start_pos || cache.deep_length() != start_pos) throw CacheError("full_forward: cache/position mismatch");
  check_capacity(start_pos, tokens.size(), w.config.max_seq_len);
  Matrix<Real> x = embed(w, tokens);
  const std::size_t l = w.config.exit_layer;
  for (std::size_t i = 0; i < w.config.n_layers; ++i) {
    KVStore<Real>& store = i < l ? cache.shallow[i] : cache.deep[i - l];
    x = apply_layer(w.layers[i], x, store, start_pos, w.config.rope_theta);
  }
  return hidden_to_logits(w, x);
}

// Plain one-token-per-forward greedy decoding. This is the reference every
// speculative run must reproduce token for token.
template <typename Real>
std::vector<TokenId> vanilla_greedy_decode(const TargetWeights<Real>& w, std::span<const TokenId> prompt, std::size_t n_tokens) {
  if (prompt.empty()) throw DomainError("prompt must be non-empty");
  std::vector<TokenId> out;
  if (n_tokens == 0) return out;
  check_capacity(0, prompt.size() + n_tokens - 1, w.config.max_seq_len);
  KVCacheSet<Real> cache(w.config);
  Matrix<Real> logits = full_forward(w, prompt, cache, 0);
  std::size_t pos = prompt.size();
  out.reserve(n_tokens);
  for (;;) {
    const TokenId next = argmax_token(logits.row(logits.rows - 1));
    out.push_back(next);
    if (out.size() == n_tokens) break;
    const TokenId one[1] = {next};
    logits = full_forward(w, std::span<const TokenId>(one), cache, pos);
    ++pos;
  }
  return out;
}

}  // namespace kangaroo
