#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kangaroo/errors.hpp"
#include "kangaroo/model.hpp"
#include "kangaroo/numerics.hpp"
#include "kangaroo/rng.hpp"

namespace kangaroo {

// The trainable bridge from layer-l features to the shared LM head:
//
//   y = output_norm(x + attention(input_norm(x)))
//
// `output_norm` takes the place of the target's final norm on the draft
// path; the head itself is borrowed from the target model.
template <typename Real>
struct AdapterWeights {
  std::vector<Real> input_norm;
  AttentionParams<Real> attention;
  std::vector<Real> output_norm;

  std::size_t d_model() const { return input_norm.size(); }

  std::size_t param_count() const { return input_norm.size() + output_norm.size() + 4 * attention.wq.size(); }

  template <typename To>
  AdapterWeights<To> cast() const {
    return {cast_vec<To>(input_norm), attention.template cast<To>(), cast_vec<To>(output_norm)};
  }

  void validate(const ModelConfig& c) const {
    if (input_norm.size() != c.d_model || output_norm.size() != c.d_model) throw DimensionError("adapter norm width mismatch");
    if (attention.n_heads != c.n_heads || attention.head_dim != c.head_dim) throw DimensionError("adapter head layout mismatch");
    attention.validate();
  }

  bool operator==(const AdapterWeights&) const = default;
};

// Attention projections ~ N(0, 1/d); both norms start at the target's
// final-norm scale so the initial adapter sits near the passthrough regime.
template <typename Real>
AdapterWeights<Real> init_adapter(const TargetWeights<Real>& model, std::uint64_t seed) {
  const ModelConfig& c = model.config;
  const Rng root = Rng(seed).fork("adapter");
  const double stddev = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  AdapterWeights<Real> a;
  a.input_norm = model.final_norm;
  a.output_norm = model.final_norm;
  a.attention.n_heads = c.n_heads;
  a.attention.head_dim = c.head_dim;
  a.attention.wq = detail::normal_matrix(root.fork("wq"), c.d_model, c.d_model, stddev).template cast<Real>();
  a.attention.wk = detail::normal_matrix(root.fork("wk"), c.d_model, c.d_model, stddev).template cast<Real>();
  a.attention.wv = detail::normal_matrix(root.fork("wv"), c.d_model, c.d_model, stddev).template cast<Real>();
  a.attention.wo = detail::normal_matrix(root.fork("wo"), c.d_model, c.d_model, stddev).template cast<Real>();
  return a;
}

// Zero attention, output norm equal to the target's final norm: the draft
// path then computes exactly final_norm(x) * lm_head.
template <typename Real>
AdapterWeights<Real> passthrough_adapter(const TargetWeights<Real>& model) {
  const ModelConfig& c = model.config;
  AdapterWeights<Real> a;
  a.input_norm.assign(c.d_model, Real(1));
  a.output_norm = model.final_norm;
  a.attention.n_heads = c.n_heads;
  a.attention.head_dim = c.head_dim;
  a.attention.wq = a.attention.wk = a.attention.wv = a.attention.wo = Matrix<Real>(c.d_model, c.d_model);
  return a;
}

template <typename Real>
Matrix<Real> adapter_forward(const AdapterWeights<Real>& adapter, const EarlyFeatures<Real>& features, KVStore<Real>& cache,
                             double rope_theta) {
  if (cache.length() != features.start) {
    throw CacheError("adapter cache holds " + std::to_string(cache.length()) + " positions, features start at " +
                     std::to_string(features.start));
  }
  Matrix<Real> h = features.rows;
  add_inplace(h, causal_attention(adapter.attention, rmsnorm_rows(features.rows, adapter.input_norm), cache, features.start,
                                  rope_theta));
  return rmsnorm_rows(h, adapter.output_norm);
}

template <typename Real>
struct DraftProbe {
  std::vector<Real> logits;
  Real confidence = 0;  // top-1 probability
  TokenId token = 0;
};

// Pushes `features` through the adapter and the shared head; the probe
// describes the last row.
template <typename Real>
DraftProbe<Real> draft_logits(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter,
                              const EarlyFeatures<Real>& features, KVStore<Real>& adapter_cache) {
  const Matrix<Real> refined = adapter_forward(adapter, features, adapter_cache, model.config.rope_theta);
  DraftProbe<Real> probe;
  probe.logits = vecmat<Real>(refined.row(refined.rows - 1), model.lm_head);
  const std::vector<Real> probs = softmax(probe.logits);
  probe.token = argmax_token(probe.logits);
  probe.confidence = probs[static_cast<std::size_t>(probe.token)];
  return probe;
}

inline constexpr double kLogClamp = 1e-12;

// Soft cross-entropy sum_t sum_n -teacher[t][n] * log(max(student[t][n], clamp)),
// with student = softmax(student_logits) rowwise.
template <typename Real>
Real distill_loss(const Matrix<Real>& student_logits, const Matrix<Real>& teacher_probs) {
  if (student_logits.rows != teacher_probs.rows || student_logits.cols != teacher_probs.cols) {
    throw DimensionError("distill_loss: " + shape_str(student_logits.rows, student_logits.cols) + " vs " +
                         shape_str(teacher_probs.rows, teacher_probs.cols));
  }
  Real loss = 0;
  for (std::size_t t = 0; t < student_logits.rows; ++t) {
    const std::vector<Real> q = softmax(student_logits.row(t));
    for (std::size_t n = 0; n < q.size(); ++n) {
      const Real p = teacher_probs(t, n);
      if (p != Real(0)) loss -= p * std::log(std::max(q[n], static_cast<Real>(kLogClamp)));
    }
  }
  return loss;
}

// d loss / d student_logits. Terms whose student probability sits under the
// log clamp are constant and contribute nothing.
template <typename Real>
Matrix<Real> distill_loss_grad(const Matrix<Real>& student_logits, const Matrix<Real>& teacher_probs) {
  if (student_logits.rows != teacher_probs.rows || student_logits.cols != teacher_probs.cols) {
    throw DimensionError("distill_loss_grad: shape mismatch");
  }
  Matrix<Real> grad(student_logits.rows, student_logits.cols);
  for (std::size_t t = 0; t < student_logits.rows; ++t) {
    const std::vector<Real> q = softmax(student_logits.row(t));
    Real active_mass = 0;
    for (std::size_t n = 0; n < q.size(); ++n) {
      if (q[n] >= static_cast<Real>(kLogClamp)) active_mass += teacher_probs(t, n);
    }
    for (std::size_t j = 0; j < q.size(); ++j) {
      const Real own = q[j] >= static_cast<Real>(kLogClamp) ? teacher_probs(t, j) : Real(0);
      grad(t, j) = q[j] * active_mass - own;
    }
  }
  return grad;
}

// Architectures compared in the adapter ablation. Only `Kangaroo` is
// trainable here; the rest exist for parameter accounting.
enum class AdapterKind { Kangaroo, KangarooPlusHead, OneLayerTransformer, MlpOnly, MedusaHeads };

struct AdapterVariant {
  AdapterKind kind = AdapterKind::Kangaroo;
  std::uint64_t heads = 4;  // MedusaHeads only

  static AdapterVariant medusa(std::uint64_t k) { return {AdapterKind::MedusaHeads, k}; }
};

inline std::string variant_name(const AdapterVariant& v) {
  switch (v.kind) {
    case AdapterKind::Kangaroo: return "kangaroo";
    case AdapterKind::KangarooPlusHead: return "kangaroo+head";
    case AdapterKind::OneLayerTransformer: return "1-layer-transformer";
    case AdapterKind::MlpOnly: return "mlp-only";
    case AdapterKind::MedusaHeads: return "medusa-" + std::to_string(v.heads);
  }
  return "?";
}

// Trainable parameters of each variant. Norms carry d scale parameters,
// attention 4d^2, a head d*V, a gated FFN 3*d*h, a linear d^2; a Medusa
// head is one linear plus its own LM head.
inline std::uint64_t count_params(std::uint64_t d, std::uint64_t vocab, std::uint64_t ffn_hidden, const AdapterVariant& v) {
  if (d == 0 || vocab == 0 || ffn_hidden == 0) throw DomainError("count_params needs positive dimensions");
  const std::uint64_t norm = d;
  const std::uint64_t attention = 4 * d * d;
  const std::uint64_t head = d * vocab;
  const std::uint64_t ffn = 3 * d * ffn_hidden;
  const std::uint64_t linear = d * d;
  switch (v.kind) {
    case AdapterKind::Kangaroo: return 2 * norm + attention;
    case AdapterKind::KangarooPlusHead: return 2 * norm + attention + head;
    case AdapterKind::OneLayerTransformer: return 3 * norm + attention + ffn;
    case AdapterKind::MlpOnly: return 2 * norm + 2 * linear + head;
    case AdapterKind::MedusaHeads: return v.heads * (linear + head);
  }
  return 0;
}

}  // namespace kangaroo
