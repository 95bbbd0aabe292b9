#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace kangaroo;

namespace {

RoundTrace round(std::size_t drafted, std::size_t emitted) {
  RoundTrace r;
  r.drafted = drafted;
  r.emitted = emitted;
  r.accepted_drafts = emitted - 1;
  r.confidences.assign(drafted, 1.0);
  return r;
}

std::vector<RoundTrace> random_traces(Rng& rng, std::size_t& n) {
  std::vector<RoundTrace> t(1 + rng.below(20));
  n = 0;
  for (auto& r : t) {
    const std::size_t d = rng.below(7);
    r = round(d, 1 + rng.below(d + 1));
    n += r.emitted;
  }
  return t;
}

}  // namespace

TEST(Simulate, HandExample) {
  LatencyModel lat;
  lat.c_big = 10;
  lat.c_adapter = 1;
  EXPECT_NEAR(simulate_speedup({round(1, 2), round(1, 2)}, lat, 4), 40.0 / 22.0, 1e-12);
}

TEST(Simulate, FreeDraftLimitEqualsCompressionRate) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 0;
    const auto t = random_traces(rng, n);
    LatencyModel lat;
    lat.c_big = 0.5 + rng.uniform();
    std::vector<std::size_t> s;
    for (const auto& r : t) s.push_back(r.emitted);
    EXPECT_NEAR(simulate_speedup(t, lat, n), compression_rate(AcceptanceRecord::from_counts(s)), 1e-9);
  }
  // Full acceptance with gamma drafts per round.
  EXPECT_NEAR(simulate_speedup({round(6, 7), round(6, 7), round(6, 7)}, LatencyModel{}, 21), 7.0, 1e-12);
}

TEST(Simulate, ZeroDraftsIsIdentity) {
  std::vector<RoundTrace> t(9, round(0, 1));
  EXPECT_DOUBLE_EQ(simulate_speedup(t, LatencyModel{}, 9), 1.0);
}

TEST(Simulate, DecreasingInEachCost) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t n = 0;
    const auto t = random_traces(rng, n);
    LatencyModel base{1.0, 0.1 * rng.uniform(), 0.1 * rng.uniform(), 0.1 * rng.uniform()};
    const double s0 = simulate_speedup(t, base, n);
    for (double LatencyModel::*field : {&LatencyModel::c_shallow, &LatencyModel::c_adapter, &LatencyModel::c_overhead}) {
      LatencyModel more = base;
      more.*field += 0.05;
      EXPECT_LT(simulate_speedup(t, more, n), s0);
    }
  }
}

TEST(Simulate, Errors) {
  EXPECT_THROW(simulate_speedup({round(1, 2)}, LatencyModel{}, 3), DomainError);
  EXPECT_THROW(simulate_speedup({}, LatencyModel{}, 0), DomainError);
  EXPECT_THROW(simulate_speedup({round(1, 2)}, LatencyModel{0.0, 0, 0, 0}, 2), DomainError);
  EXPECT_THROW(simulate_speedup({round(1, 2)}, LatencyModel{1.0, -1, 0, 0}, 2), DomainError);
}

namespace {

struct SweepFixture {
  TargetWeights<float> model = gen_model<float>(ktest::small_config(), 4);
  AdapterWeights<float> adapter = init_adapter(model, 4);
  Corpus prompts = gen_corpus(32, 4, 4, 8, 1);
};

}  // namespace

TEST(Sweep, ShapeAndOrderingProperties) {
  SweepFixture f;
  const std::vector<double> etas{0.0, 0.3, 0.6, 1.0};
  const std::vector<std::size_t> gammas{0, 2, 6};
  SweepOptions opt;
  opt.n_tokens = 24;
  const auto r = sweep(f.model, f.adapter, f.prompts, etas, gammas, LatencyModel{4.0, 1.0, 0.5, 0.0}, opt);
  ASSERT_EQ(r.grid.size(), etas.size() * gammas.size());
  for (std::size_t i = 0; i < etas.size(); ++i) {
    for (std::size_t j = 0; j < gammas.size(); ++j) {
      const auto& p = r.grid[i * gammas.size() + j];
      EXPECT_EQ(p.eta, etas[i]);
      EXPECT_EQ(p.gamma, gammas[j]);
      if (p.gamma == 0) {
        EXPECT_DOUBLE_EQ(p.cr, 1.0);
      }
      if (p.eta == 1.0) {
        EXPECT_DOUBLE_EQ(p.cr, 1.0);
      }
      EXPECT_EQ(p.measured_speedup, 0.0);
    }
  }
  // At each gamma, eta = 0 reaches the highest CR.
  for (std::size_t j = 0; j < gammas.size(); ++j)
    for (std::size_t i = 1; i < etas.size(); ++i) EXPECT_GE(r.grid[j].cr, r.grid[i * gammas.size() + j].cr);

  const auto again = sweep(f.model, f.adapter, f.prompts, etas, gammas, LatencyModel{4.0, 1.0, 0.5, 0.0}, opt);
  for (std::size_t k = 0; k < r.grid.size(); ++k) EXPECT_EQ(r.grid[k].cr, again.grid[k].cr);

  const std::string csv = sweep_csv(r);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "eta,gamma,CR,CTAR_1,CTAR_2,CTAR_3,CTAR_4,CTAR_5,CTAR_6,simulated_speedup,measured_speedup");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, r.grid.size());
}

TEST(Sweep, EmptyGridIsRejected) {
  SweepFixture f;
  EXPECT_THROW(sweep(f.model, f.adapter, f.prompts, {}, {6}, LatencyModel{}), ConfigError);
  EXPECT_THROW(sweep(f.model, f.adapter, f.prompts, {0.5}, {}, LatencyModel{}), ConfigError);
  EXPECT_THROW(sweep(f.model, f.adapter, Corpus{}, {0.5}, {6}, LatencyModel{}), ConfigError);
}

TEST(Calibrate, FitsNonNegativeCosts) {
  SweepFixture f;
  CalibrationOptions opt;
  opt.context = 8;
  opt.repetitions = 3;
  opt.inner = 4;
  const auto lat = calibrate_latency(f.model, f.adapter, {1, 3, 6}, opt);
  EXPECT_GT(lat.c_big, 0.0);
  EXPECT_GE(lat.c_shallow, 0.0);
  EXPECT_GE(lat.c_adapter, 0.0);
  EXPECT_GE(lat.c_overhead, 0.0);
  EXPECT_NO_THROW(lat.validate());
}

TEST(Calibrate, DegenerateDesignIsRejected) {
  SweepFixture f;
  CalibrationOptions opt;
  opt.repetitions = 1;
  opt.inner = 1;
  EXPECT_THROW(calibrate_latency(f.model, f.adapter, {}, opt), CalibrationError);
  EXPECT_THROW(calibrate_latency(f.model, f.adapter, {1000}, opt), CalibrationError);
}

TEST(Calibrate, RemainingStackMustBeNonEmpty) {
  ModelConfig c = ktest::small_config();
  c.exit_layer = c.n_layers;
  EXPECT_THROW(gen_model<float>(c, 1), ConfigError);
}
