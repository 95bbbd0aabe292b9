#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "kangaroo/adapter.hpp"
#include "kangaroo/adapter_grad.hpp"
#include "kangaroo/errors.hpp"
#include "kangaroo/model.hpp"
#include "kangaroo/rng.hpp"

namespace kangaroo {

using Sequence = std::vector<TokenId>;
using Corpus = std::vector<Sequence>;

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch = 8;  // sequences per optimizer step
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (epochs == 0 || batch == 0) throw ConfigError("epochs and batch must be positive");
  }
};

// Features and teacher distributions for each sequence, computed once by
// the frozen target model.
template <typename Real>
std::vector<DistillBatch<Real>> prepare_distill_data(const TargetWeights<Real>& model, const Corpus& corpus) {
  std::vector<DistillBatch<Real>> out;
  out.reserve(corpus.size());
  for (const Sequence& seq : corpus) {
    if (seq.empty()) continue;
    const std::size_t n = std::min(seq.size(), model.config.max_seq_len);
    KVCacheSet<Real> cache(model.config);
    EarlyFeatures<Real> f = forward_shallow(model, std::span<const TokenId>(seq.data(), n), cache, 0);
    const Matrix<Real> logits = forward_remaining(model, f, cache);
    DistillBatch<Real> b;
    b.early_features = std::move(f.rows);
    b.teacher_probs = Matrix<Real>(logits.rows, logits.cols);
    for (std::size_t t = 0; t < logits.rows; ++t) {
      const auto p = softmax(logits.row(t));
      std::copy(p.begin(), p.end(), b.teacher_probs.row(t).begin());
    }
    out.push_back(std::move(b));
  }
  return out;
}

// Adam with decoupled weight decay. Decay applies to the attention
// matrices only; norm scales are left undecayed.
template <typename Real>
class AdamW {
 public:
  AdamW(const AdapterWeights<Real>& shape, const TrainConfig& cfg) : cfg_(cfg), m_(zero_like(shape)), v_(zero_like(shape)) {}

  void step(AdapterWeights<Real>& params, AdapterWeights<Real>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::vector<std::span<Real>> p, g, m, v;
    std::vector<bool> decay;
    for_each_tensor(params, [&](std::span<Real> s, bool dec) {
      p.push_back(s);
      decay.push_back(dec);
    });
    for_each_tensor(grads, [&](std::span<Real> s, bool) { g.push_back(s); });
    for_each_tensor(m_, [&](std::span<Real> s, bool) { m.push_back(s); });
    for_each_tensor(v_, [&](std::span<Real> s, bool) { v.push_back(s); });
    const Real lr = static_cast<Real>(cfg_.learning_rate);
    const Real b1 = static_cast<Real>(cfg_.beta1), b2 = static_cast<Real>(cfg_.beta2);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const Real shrink = decay[k] ? Real(1) - lr * static_cast<Real>(cfg_.weight_decay) : Real(1);
      for (std::size_t i = 0; i < p[k].size(); ++i) {
        m[k][i] = b1 * m[k][i] + (Real(1) - b1) * g[k][i];
        v[k][i] = b2 * v[k][i] + (Real(1) - b2) * g[k][i] * g[k][i];
        const Real mhat = m[k][i] / static_cast<Real>(bc1);
        const Real vhat = v[k][i] / static_cast<Real>(bc2);
        p[k][i] = p[k][i] * shrink - lr * mhat / (std::sqrt(vhat) + static_cast<Real>(cfg_.adam_eps));
      }
    }
  }

 private:
  TrainConfig cfg_;
  AdapterWeights<Real> m_;
  AdapterWeights<Real> v_;
  std::uint64_t t_ = 0;
};

template <typename Real>
struct TrainResult {
  AdapterWeights<Real> adapter;
  std::vector<double> epoch_loss;  // mean per-token loss of each epoch
};

template <typename Real>
TrainResult<Real> train_adapter(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter_init, const Corpus& corpus,
                                const TrainConfig& cfg) {
  cfg.validate();
  const auto data = prepare_distill_data(model, corpus);
  if (data.empty()) throw ConfigError("training corpus is empty");
  adapter_init.validate(model.config);

  TrainResult<Real> result{adapter_init, {}};
  AdamW<Real> opt(adapter_init, cfg);
  const Rng shuffle_root = Rng(cfg.seed).fork("shuffle");
  std::vector<std::size_t> order(data.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = shuffle_root.fork(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      AdapterWeights<Real> grads = zero_like(result.adapter);
      std::size_t tokens = 0;
      for (std::size_t j = b; j < e; ++j) {
        const auto& batch = data[order[j]];
        auto g = adapter_backward(result.adapter, model.lm_head, batch, model.config.rope_theta);
        epoch_loss += static_cast<double>(g.loss);
        tokens += batch.early_features.rows;
        std::vector<std::span<Real>> acc;
        for_each_tensor(grads, [&](std::span<Real> s, bool) { acc.push_back(s); });
        std::size_t k = 0;
        for_each_tensor(g.grads, [&](std::span<Real> s, bool) {
          for (std::size_t i = 0; i < s.size(); ++i) acc[k][i] += s[i];
          ++k;
        });
      }
      epoch_tokens += tokens;
      const Real inv = Real(1) / static_cast<Real>(tokens);
      for_each_tensor(grads, [&](std::span<Real> s, bool) {
        for (auto& x : s) x *= inv;
      });
      opt.step(result.adapter, grads);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(epoch_tokens));
  }
  return result;
}

// Mean per-token distillation loss of a fixed adapter (no updates).
template <typename Real>
double evaluate_distill_loss(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter, const Corpus& corpus) {
  const auto data = prepare_distill_data(model, corpus);
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : data) {
    KVStore<Real> cache(model.config.max_seq_len, model.config.d_model);
    const Matrix<Real> refined = adapter_forward(adapter, EarlyFeatures<Real>{0, b.early_features}, cache, model.config.rope_theta);
    total += static_cast<double>(distill_loss(matmul(refined, model.lm_head), b.teacher_probs));
    tokens += b.early_features.rows;
  }
  if (tokens == 0) throw ConfigError("evaluation corpus is empty");
  return total / static_cast<double>(tokens);
}

}  // namespace kangaroo
