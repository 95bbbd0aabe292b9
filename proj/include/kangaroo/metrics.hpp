#pragma once

#include <array>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kangaroo/engine.hpp"
#include "kangaroo/errors.hpp"

namespace kangaroo {

inline constexpr std::size_t kCtarWindows = 6;

// Tokens accepted per remaining-layer forward, s_1 .. s_|S|.
struct AcceptanceRecord {
  std::vector<std::size_t> s;
  std::size_t n_tokens = 0;

  static AcceptanceRecord from(const GenerationResult& g) {
    AcceptanceRecord r;
    r.s = g.accepted_per_forward();
    r.n_tokens = g.tokens.size();
    return r;
  }

  static AcceptanceRecord from_counts(std::vector<std::size_t> s) {
    AcceptanceRecord r;
    r.n_tokens = std::accumulate(s.begin(), s.end(), std::size_t{0});
    r.s = std::move(s);
    return r;
  }

  void validate() const {
    if (s.empty()) throw DomainError("acceptance record has no rounds");
    std::size_t total = 0;
    for (std::size_t v : s) {
      if (v < 1) throw DomainError("every round emits at least one token");
      total += v;
    }
    if (total != n_tokens) throw DomainError("sum of per-round counts differs from n_tokens");
  }
};

// Mean tokens per big-model forward: N / |S|.
inline double compression_rate(const AcceptanceRecord& rec) {
  rec.validate();
  return static_cast<double>(rec.n_tokens) / static_cast<double>(rec.s.size());
}

// Fraction of rounds whose count exceeds w, i.e. whose first w drafts
// were all accepted.
inline double ctar(const AcceptanceRecord& rec, std::size_t w) {
  rec.validate();
  std::size_t hits = 0;
  for (std::size_t v : rec.s) hits += v > w ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(rec.s.size());
}

struct PromptTiming {
  double kangaroo_seconds = 0.0;
  double vanilla_seconds = 0.0;
};

struct BenchReport {
  std::string subtask = "corpus";
  std::size_t prompts = 0;
  std::size_t tokens = 0;
  std::size_t rounds = 0;
  double cr = 0.0;        // pooled: total tokens / total rounds
  double cr_macro = 0.0;  // mean of per-prompt CR
  std::array<double, kCtarWindows> ctar{};        // pooled over all rounds
  std::array<double, kCtarWindows> ctar_macro{};  // mean of per-prompt CTAR
  double speedup = 0.0;            // mean per-prompt vanilla / kangaroo walltime
  double simulated_speedup = 0.0;  // filled in by the latency model
  double tokens_per_sec = 0.0;
};

inline BenchReport aggregate(const std::vector<AcceptanceRecord>& records, const std::vector<PromptTiming>& timings,
                             std::string subtask = "corpus") {
  if (records.empty()) throw DomainError("aggregate needs at least one record");
  if (timings.size() != records.size()) throw DomainError("aggregate: records and walltimes differ in length");
  BenchReport r;
  r.subtask = std::move(subtask);
  r.prompts = records.size();
  AcceptanceRecord pooled;
  double kangaroo_total = 0.0, speedup_sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    r.cr_macro += compression_rate(rec);
    for (std::size_t w = 0; w < kCtarWindows; ++w) r.ctar_macro[w] += ctar(rec, w + 1);
    pooled.s.insert(pooled.s.end(), rec.s.begin(), rec.s.end());
    pooled.n_tokens += rec.n_tokens;
    kangaroo_total += timings[i].kangaroo_seconds;
    if (timings[i].kangaroo_seconds > 0.0) speedup_sum += timings[i].vanilla_seconds / timings[i].kangaroo_seconds;
  }
  const double n = static_cast<double>(records.size());
  r.cr_macro /= n;
  for (auto& c : r.ctar_macro) c /= n;
  r.tokens = pooled.n_tokens;
  r.rounds = pooled.s.size();
  r.cr = compression_rate(pooled);
  for (std::size_t w = 0; w < kCtarWindows; ++w) r.ctar[w] = ctar(pooled, w + 1);
  r.speedup = speedup_sum / n;
  r.tokens_per_sec = kangaroo_total > 0.0 ? static_cast<double>(r.tokens) / kangaroo_total : 0.0;
  return r;
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json j;
  j["subtask"] = r.subtask;
  j["prompts"] = r.prompts;
  j["tokens"] = r.tokens;
  j["rounds"] = r.rounds;
  j["CR"] = r.cr;
  j["CR_macro"] = r.cr_macro;
  for (std::size_t w = 0; w < kCtarWindows; ++w) {
    j["CTAR_" + std::to_string(w + 1)] = r.ctar[w];
    j["CTAR_macro_" + std::to_string(w + 1)] = r.ctar_macro[w];
  }
  j["speedup"] = r.speedup;
  j["simulated_speedup"] = r.simulated_speedup;
  j["tokens_per_sec"] = r.tokens_per_sec;
  return j;
}

inline std::string csv_header() {
  std::string h = "subtask,CR";
  for (std::size_t w = 1; w <= kCtarWindows; ++w) h += ",CTAR_" + std::to_string(w);
  return h + ",speedup,tokens_per_sec";
}

inline std::string to_csv_row(const BenchReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.subtask << ',' << r.cr;
  for (double c : r.ctar) os << ',' << c;
  os << ',' << r.speedup << ',' << r.tokens_per_sec;
  return os.str();
}

}  // namespace kangaroo
