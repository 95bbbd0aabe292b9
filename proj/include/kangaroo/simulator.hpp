#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <chrono>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "kangaroo/adapter.hpp"
#include "kangaroo/engine.hpp"
#include "kangaroo/errors.hpp"
#include "kangaroo/metrics.hpp"
#include "kangaroo/model.hpp"
#include "kangaroo/trainer.hpp"

namespace kangaroo {

// Abstract per-component costs (any consistent time unit).
struct LatencyModel {
  double c_big = 1.0;       // one remaining-layer forward over a verification unit
  double c_shallow = 0.0;   // shallow forward of one token
  double c_adapter = 0.0;   // adapter + head probe for one token
  double c_overhead = 0.0;  // fixed per-round cost

  void validate() const {
    if (!(c_big > 0.0)) throw DomainError("c_big must be positive");
    if (c_shallow < 0.0 || c_adapter < 0.0 || c_overhead < 0.0) throw DomainError("latency costs must be non-negative");
  }
};

// Predicted speedup over vanilla decoding, which pays c_big per token.
// Round k costs d_k probes (shallow + adapter), one extra shallow pass for
// the final token's early feature, the verification forward and the
// per-round overhead.
inline double simulate_speedup(const std::vector<RoundTrace>& traces, const LatencyModel& lat, std::size_t n_tokens) {
  lat.validate();
  std::size_t emitted = 0;
  double cost = 0.0;
  for (const auto& r : traces) {
    emitted += r.emitted;
    cost += static_cast<double>(r.drafted) * (lat.c_shallow + lat.c_adapter) + lat.c_shallow + lat.c_big + lat.c_overhead;
  }
  if (emitted != n_tokens) {
    throw DomainError("traces emit " + std::to_string(emitted) + " tokens, expected " + std::to_string(n_tokens));
  }
  if (traces.empty()) throw DomainError("no rounds to simulate");
  return static_cast<double>(n_tokens) * lat.c_big / cost;
}

struct SweepPoint {
  double eta = 0.0;
  std::size_t gamma = 0;
  double cr = 0.0;
  std::array<double, kCtarWindows> ctar{};
  double simulated_speedup = 0.0;
  double measured_speedup = 0.0;  // 0 when timing is disabled
};

struct SimReport {
  std::vector<SweepPoint> grid;  // eta-major: for each eta, every gamma
  double predicted_speedup = 0.0;  // best simulated point
  double predicted_cr = 0.0;       // CR at that point
};

struct SweepOptions {
  std::size_t n_tokens = 64;
  bool measure_walltime = false;
  std::size_t repetitions = 3;
};

template <typename Real>
SimReport sweep(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter, const Corpus& prompts,
                const std::vector<double>& eta_grid, const std::vector<std::size_t>& gamma_grid, const LatencyModel& lat,
                const SweepOptions& opt = {}) {
  if (eta_grid.empty() || gamma_grid.empty()) throw ConfigError("sweep grids must be non-empty");
  if (prompts.empty()) throw ConfigError("sweep needs at least one prompt");

  std::vector<double> vanilla_secs(prompts.size(), 0.0);
  if (opt.measure_walltime) {
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      vanilla_secs[i] = measure_walltime(
                            [&] { return vanilla_greedy_decode(model, prompts[i], opt.n_tokens).size(); }, opt.repetitions)
                            .seconds;
    }
  }

  SimReport report;
  for (double eta : eta_grid) {
    for (std::size_t gamma : gamma_grid) {
      const DraftPolicy policy{eta, gamma};
      std::vector<RoundTrace> all_rounds;
      std::vector<AcceptanceRecord> records;
      std::vector<PromptTiming> timings;
      std::size_t total_tokens = 0;
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        const GenerationResult g = kangaroo_generate(model, adapter, policy, prompts[i], opt.n_tokens);
        records.push_back(AcceptanceRecord::from(g));
        all_rounds.insert(all_rounds.end(), g.rounds.begin(), g.rounds.end());
        total_tokens += g.tokens.size();
        PromptTiming t;
        if (opt.measure_walltime) {
          t.vanilla_seconds = vanilla_secs[i];
          t.kangaroo_seconds =
              measure_walltime([&] { return kangaroo_generate(model, adapter, policy, prompts[i], opt.n_tokens).tokens.size(); },
                               opt.repetitions)
                  .seconds;
        }
        timings.push_back(t);
      }
      const BenchReport agg = aggregate(records, timings);
      SweepPoint p;
      p.eta = eta;
      p.gamma = gamma;
      p.cr = agg.cr;
      p.ctar = agg.ctar;
      p.simulated_speedup = simulate_speedup(all_rounds, lat, total_tokens);
      p.measured_speedup = opt.measure_walltime ? agg.speedup : 0.0;
      report.grid.push_back(p);
    }
  }
  const auto best = std::max_element(report.grid.begin(), report.grid.end(),
                                     [](const SweepPoint& a, const SweepPoint& b) { return a.simulated_speedup < b.simulated_speedup; });
  report.predicted_speedup = best->simulated_speedup;
  report.predicted_cr = best->cr;
  return report;
}

inline std::string sweep_csv(const SimReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "eta,gamma,CR";
  for (std::size_t w = 1; w <= kCtarWindows; ++w) os << ",CTAR_" << w;
  os << ",simulated_speedup,measured_speedup\n";
  for (const auto& p : r.grid) {
    os << p.eta << ',' << p.gamma << ',' << p.cr;
    for (double c : p.ctar) os << ',' << c;
    os << ',' << p.simulated_speedup << ',' << p.measured_speedup << '\n';
  }
  return os.str();
}

namespace detail {

template <typename Fn>
double median_seconds(Fn&& fn, std::size_t reps, std::size_t inner) {
  fn();
  std::vector<double> secs;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    secs.push_back(std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(inner));
  }
  std::sort(secs.begin(), secs.end());
  return secs[secs.size() / 2];
}

}  // namespace detail

struct CalibrationOptions {
  std::size_t context = 32;      // prefix length the micro-runs decode after
  std::size_t repetitions = 5;
  std::size_t inner = 20;
};

// Fits the four costs by least squares over timed micro-runs:
//   shallow forward of one token          -> c_shallow
//   adapter probe of one feature          -> c_adapter
//   remaining-layer forward of one row    -> c_big
//   whole round with m forced drafts      -> m(c_s + c_a) + c_s + c_big + c_o
// On CPU the remaining-layer cost grows with the unit length; that growth
// lands in the per-draft terms through the round rows.
// Negative fitted costs are clamped to zero. Without at least one probe
// length the design cannot separate c_big from the overhead.
template <typename Real>
LatencyModel calibrate_latency(const TargetWeights<Real>& model, const AdapterWeights<Real>& adapter,
                               const std::vector<std::size_t>& probe_lengths, const CalibrationOptions& opt = {}) {
  const ModelConfig& c = model.config;
  std::size_t longest = 0;
  for (std::size_t m : probe_lengths) longest = std::max(longest, m);
  if (opt.context + longest + 2 > c.max_seq_len) throw CalibrationError("probe lengths exceed the model's context");

  Sequence prefix(opt.context);
  for (std::size_t i = 0; i < prefix.size(); ++i) prefix[i] = static_cast<TokenId>((i * 7 + 3) % c.vocab_size);

  std::vector<std::array<double, 4>> rows;
  std::vector<double> times;

  KangarooSession<Real> s(model, adapter);
  s.prefill(prefix);
  const std::size_t pos = s.position;
  const TokenId tok[1] = {s.last_token};

  times.push_back(detail::median_seconds(
      [&] {
        forward_shallow(model, std::span<const TokenId>(tok), s.caches, pos);
        s.caches.truncate_shallow(pos);
      },
      opt.repetitions, opt.inner));
  rows.push_back({1, 0, 0, 0});

  const EarlyFeatures<Real> f0 = forward_shallow(model, std::span<const TokenId>(tok), s.caches, pos);
  s.caches.truncate_shallow(pos);
  // The prefill leaves the adapter exactly at `pos` (no pending rows).
  times.push_back(detail::median_seconds(
      [&] {
        draft_logits(model, adapter, f0, s.caches.adapter);
        s.caches.adapter.truncate(pos);
      },
      opt.repetitions, opt.inner));
  rows.push_back({0, 1, 0, 0});

  times.push_back(detail::median_seconds(
      [&] {
        forward_remaining(model, f0, s.caches);
        s.caches.truncate_deep(pos);
      },
      opt.repetitions, opt.inner));
  rows.push_back({0, 0, 1, 0});

  for (std::size_t m : probe_lengths) {
    // Whole rounds, timed without their prefill.
    const DraftPolicy forced{0.0, m};
    const std::size_t inner = std::max<std::size_t>(1, opt.inner / 4);
    std::vector<double> secs;
    for (std::size_t r = 0; r < opt.repetitions; ++r) {
      double total = 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        KangarooSession<Real> round(model, adapter);
        round.prefill(prefix);
        const auto t0 = std::chrono::steady_clock::now();
        auto w = draft_window(round, forced, m);
        verify_window(round, w);
        total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      secs.push_back(total / static_cast<double>(inner));
    }
    std::sort(secs.begin(), secs.end());
    times.push_back(secs[secs.size() / 2]);
    const double md = static_cast<double>(m);
    rows.push_back({md + 1.0, md, 1, 1});
  }

  Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), 4);
  Eigen::VectorXd b(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < 4; ++j) a(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    b(static_cast<Eigen::Index>(i)) = times[i];
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < 4) throw CalibrationError("latency design matrix is singular; supply at least one probe length");
  const Eigen::VectorXd x = qr.solve(b);

  LatencyModel lat;
  lat.c_shallow = std::max(0.0, x(0));
  lat.c_adapter = std::max(0.0, x(1));
  lat.c_big = std::max(0.0, x(2));
  lat.c_overhead = std::max(0.0, x(3));
  if (!(lat.c_big > 0.0)) throw CalibrationError("fitted verification cost is not positive");
  return lat;
}

}  // namespace kangaroo
