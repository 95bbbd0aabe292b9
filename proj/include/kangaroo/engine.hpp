#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kangaroo/adapter.hpp"
#include "kangaroo/errors.hpp"
#include "kangaroo/model.hpp"
#include "kangaroo/numerics.hpp"

namespace kangaroo {

struct DraftPolicy {
  double eta = 0.6;            // stop drafting once top-1 confidence <= eta
  std::size_t gamma_max = 6;   // hard cap on drafts per round
  // With eta >= 1 every probe stops drafting, so the probe can be skipped.
  // Off by default so traces look the same for every eta.
  bool skip_probe_at_full_eta = false;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1], got " + std::to_string(eta));
  }
};

enum class StopReason { Threshold, MaxSteps, Capacity };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Threshold: return "threshold";
    case StopReason::MaxSteps: return "max_steps";
    case StopReason::Capacity: return "capacity";
  }
  return "?";
}

struct RoundTrace {
  std::size_t drafted = 0;          // d_k
  std::size_t accepted_drafts = 0;
  std::size_t emitted = 0;          // s_k = accepted_drafts + 1
  std::vector<double> confidences;  // one per drafted token, all > eta
  // Confidence of the probe that ended drafting; its token is not drafted.
  std::optional<double> stop_confidence;
  StopReason stop_reason = StopReason::MaxSteps;
};

struct GenerationResult {
  std::vector<TokenId> tokens;
  std::vector<RoundTrace> rounds;
  std::size_t big_forward_count = 0;  // |S|
  bool truncated = false;             // ran out of positions before n_tokens

  std::vector<std::size_t> accepted_per_forward() const {
    std::vector<std::size_t> s;
    s.reserve(rounds.size());
    for (const auto& r : rounds) s.push_back(r.emitted);
    return s;
  }
};

// Decoding state shared by the draft and verify phases.
//
// Invariants between rounds, with P = position of `last_token`:
//   shallow and deep caches hold exactly P positions;
//   adapter cache length + pending.size() == P, with pending.start equal to
//   the adapter cache length (features the adapter has not consumed yet).
template <typename Real>
class KangarooSession {
 public:
  KangarooSession(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter)
      : caches(model.config), model_(&model), adapter_(&adapter) {
    adapter.validate(model.config);
  }

  // Runs everything but the final prompt token, which becomes last_token.
  void prefill(std::span<const TokenId> prompt) {
    if (prompt.empty()) throw DomainError("prompt must be non-empty");
    check_capacity(0, prompt.size(), model_->config.max_seq_len);
    caches = KVCacheSet<Real>(model_->config);
    pending = {0, Matrix<Real>(0, model_->config.d_model)};
    if (prompt.size() > 1) {
      const auto head = prompt.first(prompt.size() - 1);
      EarlyFeatures<Real> f = forward_shallow(*model_, head, caches, 0);
      forward_remaining(*model_, f, caches);
      adapter_forward(*adapter_, f, caches.adapter, model_->config.rope_theta);
      pending.start = f.end();
    }
    last_token = prompt.back();
    position = prompt.size() - 1;
  }

  void append_pending(const EarlyFeatures<Real>& f) {
    if (pending.end() != f.start) throw CacheError("pending adapter features are not contiguous");
    pending.rows.data.insert(pending.rows.data.end(), f.rows.data.begin(), f.rows.data.end());
    pending.rows.rows += f.rows.rows;
  }

  const TargetWeights<Real>& model() const { return *model_; }
  const AdapterWeights<Real>& adapter() const { return *adapter_; }

  KVCacheSet<Real> caches;
  EarlyFeatures<Real> pending;
  TokenId last_token = 0;
  std::size_t position = 0;

 private:
  const TargetWeights<Real>* model_;
  const AdapterWeights<Real>* adapter_;
};

template <typename Real>
struct DraftWindow {
  std::vector<TokenId> drafts;
  EarlyFeatures<Real> unit;  // f_0 .. f_d, one more than drafts
  std::vector<double> confidences;
  std::optional<double> stop_confidence;
  StopReason stop_reason = StopReason::MaxSteps;
};

// Drafting phase. Shallow-forwards the last committed token, then keeps
// asking the adapter for the next token until its confidence is <= eta,
// `max_drafts` (or gamma_max) tokens are drafted, or positions run out. The
// early feature of every drafted token is computed, so the verification
// unit always holds drafts + 1 features.
template <typename Real>
DraftWindow<Real> draft_window(KangarooSession<Real>& s, const DraftPolicy& policy, std::size_t max_drafts) {
  const auto& model = s.model();
  const std::size_t cap = model.config.max_seq_len;
  if (s.position >= cap) throw CapacityError("no position left for the last committed token");
  const std::size_t room = cap - 1 - s.position;
  const std::size_t wanted = std::min(policy.gamma_max, max_drafts);
  const std::size_t budget = std::min(wanted, room);

  DraftWindow<Real> w;
  const TokenId first[1] = {s.last_token};
  w.unit = forward_shallow(model, std::span<const TokenId>(first), s.caches, s.position);
  s.append_pending(w.unit);

  for (;;) {
    if (w.drafts.size() == budget) {
      w.stop_reason = budget < wanted ? StopReason::Capacity : StopReason::MaxSteps;
      break;
    }
    if (policy.skip_probe_at_full_eta && policy.eta >= 1.0) {
      w.stop_reason = StopReason::Threshold;
      break;
    }
    const DraftProbe<Real> probe = draft_logits(model, s.adapter(), s.pending, s.caches.adapter);
    s.pending = {s.caches.adapter_length(), Matrix<Real>(0, model.config.d_model)};
    const double conf = static_cast<double>(probe.confidence);
    if (conf <= policy.eta) {
      w.stop_confidence = conf;
      w.stop_reason = StopReason::Threshold;
      break;
    }
    w.drafts.push_back(probe.token);
    w.confidences.push_back(conf);
    const TokenId next[1] = {probe.token};
    const EarlyFeatures<Real> f = forward_shallow(model, std::span<const TokenId>(next), s.caches, w.unit.end());
    s.append_pending(f);
    w.unit.rows.data.insert(w.unit.rows.data.end(), f.rows.data.begin(), f.rows.data.end());
    w.unit.rows.rows += 1;
  }
  return w;
}

struct VerifyOutcome {
  std::size_t accepted_drafts = 0;
  std::vector<TokenId> emitted;
};

// Test-only fault injection for negative controls.
struct EngineFaults {
  bool accept_one_extra = false;  // off-by-one acceptance
};

// Verification phase: one forward of the remaining layers over the whole
// unit, longest matching prefix accepted, one target token appended, and
// every cache cut back to the new committed length.
template <typename Real>
VerifyOutcome verify_window(KangarooSession<Real>& s, const DraftWindow<Real>& w, const EngineFaults& faults = {}) {
  if (w.unit.size() != w.drafts.size() + 1) throw CacheError("verification unit must hold drafts + 1 features");
  if (w.unit.start != s.position) throw CacheError("verification unit does not start at the committed position");
  const Matrix<Real> logits = forward_remaining(s.model(), w.unit, s.caches);

  VerifyOutcome out;
  const std::size_t d = w.drafts.size();
  while (out.accepted_drafts < d && w.drafts[out.accepted_drafts] == argmax_token(logits.row(out.accepted_drafts))) {
    ++out.accepted_drafts;
  }
  if (faults.accept_one_extra && out.accepted_drafts < d) ++out.accepted_drafts;
  out.emitted.assign(w.drafts.begin(), w.drafts.begin() + static_cast<std::ptrdiff_t>(out.accepted_drafts));
  out.emitted.push_back(argmax_token(logits.row(out.accepted_drafts)));

  const std::size_t committed = s.position + out.accepted_drafts + 1;
  s.caches.truncate_shallow(committed);
  s.caches.truncate_deep(committed);
  const std::size_t alen = s.caches.adapter_length();
  if (alen >= committed) {
    s.caches.adapter.truncate(committed);
    s.pending = {committed, Matrix<Real>(0, s.model().config.d_model)};
  } else {
    // Features the adapter has not seen yet are still valid up to the
    // committed length; keep them for the next probe.
    s.pending.rows = s.pending.rows.slice_rows(0, committed - alen);
  }
  s.last_token = out.emitted.back();
  s.position = committed;
  return out;
}

// Self-speculative greedy generation. The output always equals
// vanilla_greedy_decode(model, prompt, n_tokens); only the number of
// remaining-layer forwards changes. The draft budget of a round never
// exceeds the tokens still owed, so no round emits past n_tokens.
template <typename Real>
GenerationResult kangaroo_generate(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter, const DraftPolicy& policy,
                                   std::span<const TokenId> prompt, std::size_t n_tokens, const EngineFaults& faults = {}) {
  policy.validate();
  if (prompt.empty()) throw DomainError("prompt must be non-empty");
  GenerationResult result;
  if (n_tokens == 0) return result;
  KangarooSession<Real> s(model, adapter);
  s.prefill(prompt);
  result.tokens.reserve(n_tokens);

  while (result.tokens.size() < n_tokens) {
    if (s.position >= model.config.max_seq_len) {
      result.truncated = true;
      break;
    }
    const std::size_t remaining = n_tokens - result.tokens.size();
    DraftWindow<Real> w = draft_window(s, policy, remaining - 1);
    VerifyOutcome v = verify_window(s, w, faults);

    RoundTrace t;
    t.drafted = w.drafts.size();
    t.accepted_drafts = v.accepted_drafts;
    t.emitted = v.emitted.size();
    t.confidences = std::move(w.confidences);
    t.stop_confidence = w.stop_confidence;
    t.stop_reason = w.stop_reason;
    result.rounds.push_back(std::move(t));
    result.tokens.insert(result.tokens.end(), v.emitted.begin(), v.emitted.end());
  }
  result.big_forward_count = result.rounds.size();
  return result;
}

struct WallTime {
  double seconds = 0.0;  // median over repetitions
  double tokens_per_sec = 0.0;
};

// Times `fn` (which returns the number of tokens it produced) after one
// untimed warmup call. Reports the median of `repetitions` runs.
template <typename Fn>
WallTime measure_walltime(Fn&& fn, std::size_t repetitions = 3) {
  repetitions = std::max<std::size_t>(repetitions, 3);
  fn();
  std::vector<double> secs;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    tokens = fn();
    const auto t1 = std::chrono::steady_clock::now();
    secs.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(secs.begin(), secs.end());
  WallTime w;
  w.seconds = secs[secs.size() / 2];
  w.tokens_per_sec = w.seconds > 0.0 ? static_cast<double>(tokens) / w.seconds : 0.0;
  return w;
}

}  // namespace kangaroo
