// kangaroo: generate synthetic models and corpora, train adapters, and
// benchmark / verify self-speculative decoding.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kangaroo/kangaroo.hpp"

namespace fs = std::filesystem;
using namespace kangaroo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;

// Thrown when a speculative run disagrees with the vanilla oracle.
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string model, adapter, corpus, out = "-", format = "json";
  std::string loss_out;
  double eta = 0.6;
  std::size_t gamma = 6;
  std::optional<std::size_t> exit_layer;
  std::size_t n_tokens = 64;
  std::uint64_t seed = 0;
  bool f64 = false;

  // gen-model
  ModelConfig config;
  ModelInit init;
  // gen-corpus
  std::size_t n_seqs = 200, min_len = 16, max_len = 48, vocab = 256;
  // train
  TrainConfig train;
  bool passthrough = false;
  // bench / sweep / verify
  std::vector<double> etas{0.0, 0.3, 0.6, 1.0};
  std::vector<std::size_t> gammas{0, 2, 6};
  std::size_t reps = 3;
  bool no_timing = false;
  bool calibrate = false;
  LatencyModel latency;
  bool latency_set = false;
  std::size_t max_prompt = 0;  // 0 keeps whole prompts
  bool fault_accept_extra = false;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("--") + what + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(what) + " file not found: " + path);
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + out + " for writing");
  f << text;
  if (!f) throw FormatError("write failed for " + out);
}

template <typename Real>
TargetWeights<Real> load_model(const Options& o) {
  require_file(o.model, "model");
  TargetWeights<Real> w = load_weights<Real>(o.model);
  if (o.exit_layer) {
    w.config.exit_layer = *o.exit_layer;
    w.config.validate();
  }
  return w;
}

template <typename Real>
AdapterWeights<Real> load_adapter_for(const Options& o, const TargetWeights<Real>& model) {
  require_file(o.adapter, "adapter");
  AdapterWeights<Real> a = load_adapter<Real>(o.adapter);
  a.validate(model.config);
  return a;
}

Corpus load_prompts(const Options& o, const ModelConfig& c) {
  require_file(o.corpus, "corpus");
  Corpus prompts = load_corpus(o.corpus);
  Corpus kept;
  for (auto& p : prompts) {
    if (p.empty()) continue;
    if (o.max_prompt > 0 && p.size() > o.max_prompt) p.resize(o.max_prompt);
    for (TokenId t : p) {
      if (static_cast<std::size_t>(t) >= c.vocab_size) {
        throw ConfigError(o.corpus + ": token " + std::to_string(t) + " outside vocabulary " + std::to_string(c.vocab_size));
      }
    }
    if (p.size() + o.n_tokens > c.max_seq_len + 1) {
      throw ConfigError("prompt of length " + std::to_string(p.size()) + " plus " + std::to_string(o.n_tokens) +
                        " tokens exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    kept.push_back(std::move(p));
  }
  if (kept.empty()) throw ConfigError(o.corpus + " holds no prompts");
  return kept;
}

// Layer-proportional costs in units of one decoder layer, used when no
// calibration or explicit costs are given. The adapter counts as one layer.
LatencyModel layer_latency(const ModelConfig& c) {
  LatencyModel lat;
  lat.c_shallow = static_cast<double>(c.exit_layer);
  lat.c_adapter = 1.0;
  lat.c_big = static_cast<double>(c.n_layers - c.exit_layer);
  lat.c_overhead = 0.0;
  return lat;
}

template <typename Real>
LatencyModel pick_latency(const Options& o, const TargetWeights<Real>& m, const AdapterWeights<Real>& a) {
  if (o.latency_set) return o.latency;
  if (o.calibrate) return calibrate_latency(m, a, {1, 2, 4, 6});
  return layer_latency(m.config);
}

nlohmann::json latency_json(const LatencyModel& l) {
  return {{"c_big", l.c_big}, {"c_shallow", l.c_shallow}, {"c_adapter", l.c_adapter}, {"c_overhead", l.c_overhead}};
}

std::string divergence_report(std::size_t prompt_id, const GenerationResult& g, const std::vector<TokenId>& expected) {
  std::size_t pos = 0;
  while (pos < expected.size() && pos < g.tokens.size() && expected[pos] == g.tokens[pos]) ++pos;
  std::ostringstream os;
  os << "losslessness violation: prompt " << prompt_id << ", generated position " << pos;
  if (pos < expected.size() && pos < g.tokens.size()) {
    os << ", expected token " << expected[pos] << ", got " << g.tokens[pos];
  } else {
    os << ", lengths " << g.tokens.size() << " vs " << expected.size();
  }
  std::size_t start = 0;
  for (std::size_t r = 0; r < g.rounds.size(); ++r) {
    const RoundTrace& t = g.rounds[r];
    if (pos < start + t.emitted || r + 1 == g.rounds.size()) {
      os << "\n  round " << r << ": output positions " << start << ".." << start + t.emitted - 1 << ", drafted " << t.drafted
         << ", accepted " << t.accepted_drafts << ", stop " << to_string(t.stop_reason) << "\n  emitted:";
      for (std::size_t i = start; i < start + t.emitted && i < g.tokens.size(); ++i) os << ' ' << g.tokens[i];
      os << "\n  vanilla:";
      for (std::size_t i = start; i < start + t.emitted && i < expected.size(); ++i) os << ' ' << expected[i];
      break;
    }
    start += t.emitted;
  }
  return os.str();
}

template <typename Real>
int run_bench(const Options& o) {
  const auto model = load_model<Real>(o);
  const auto adapter = load_adapter_for<Real>(o, model);
  const Corpus prompts = load_prompts(o, model.config);
  const DraftPolicy policy{o.eta, o.gamma};
  policy.validate();
  const EngineFaults faults{o.fault_accept_extra};

  std::vector<AcceptanceRecord> records;
  std::vector<PromptTiming> timings;
  std::vector<RoundTrace> all_rounds;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto expected = vanilla_greedy_decode(model, prompts[i], o.n_tokens);
    const GenerationResult g = kangaroo_generate(model, adapter, policy, prompts[i], o.n_tokens, faults);
    if (g.tokens != expected) throw VerificationFailure(divergence_report(i, g, expected));
    records.push_back(AcceptanceRecord::from(g));
    all_rounds.insert(all_rounds.end(), g.rounds.begin(), g.rounds.end());
    PromptTiming t;
    if (!o.no_timing) {
      t.vanilla_seconds = measure_walltime([&] { return vanilla_greedy_decode(model, prompts[i], o.n_tokens).size(); }, o.reps).seconds;
      t.kangaroo_seconds =
          measure_walltime([&] { return kangaroo_generate(model, adapter, policy, prompts[i], o.n_tokens).tokens.size(); }, o.reps)
              .seconds;
    }
    timings.push_back(t);
  }
  BenchReport r = aggregate(records, timings, fs::path(o.corpus).stem().string());
  const LatencyModel lat = pick_latency(o, model, adapter);
  r.simulated_speedup = simulate_speedup(all_rounds, lat, r.tokens);

  if (o.format == "csv") {
    emit(o.out, csv_header() + "\n" + to_csv_row(r) + "\n");
  } else {
    nlohmann::json j = to_json(r);
    j["eta"] = o.eta;
    j["gamma"] = o.gamma;
    j["n_tokens"] = o.n_tokens;
    j["latency"] = latency_json(lat);
    emit(o.out, j.dump(2) + "\n");
  }
  return kExitOk;
}

template <typename Real>
int run_verify(const Options& o) {
  if (o.etas.empty() || o.gammas.empty()) throw ConfigError("verification grid must be non-empty");
  const auto model = load_model<Real>(o);
  const auto adapter = load_adapter_for<Real>(o, model);
  const Corpus prompts = load_prompts(o, model.config);
  const EngineFaults faults{o.fault_accept_extra};
  std::size_t checks = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto expected = vanilla_greedy_decode(model, prompts[i], o.n_tokens);
    for (double eta : o.etas) {
      for (std::size_t gamma : o.gammas) {
        const DraftPolicy policy{eta, gamma};
        policy.validate();
        const GenerationResult g = kangaroo_generate(model, adapter, policy, prompts[i], o.n_tokens, faults);
        if (g.tokens != expected) {
          std::ostringstream os;
          os << "eta " << eta << ", gamma " << gamma << ": " << divergence_report(i, g, expected);
          throw VerificationFailure(os.str());
        }
        ++checks;
      }
    }
  }
  std::cout << "lossless: " << checks << " runs over " << prompts.size() << " prompts match vanilla greedy decoding\n";
  return kExitOk;
}

template <typename Real>
int run_sweep(const Options& o) {
  if (o.etas.empty() || o.gammas.empty()) throw ConfigError("sweep grid must be non-empty");
  const auto model = load_model<Real>(o);
  const auto adapter = load_adapter_for<Real>(o, model);
  const Corpus prompts = load_prompts(o, model.config);
  const LatencyModel lat = pick_latency(o, model, adapter);
  SweepOptions so;
  so.n_tokens = o.n_tokens;
  so.measure_walltime = !o.no_timing;
  so.repetitions = o.reps;
  const SimReport r = sweep(model, adapter, prompts, o.etas, o.gammas, lat, so);
  emit(o.out, sweep_csv(r));
  return kExitOk;
}

template <typename Real>
int run_train(const Options& o) {
  const auto model = load_model<Real>(o);
  const Corpus corpus = load_prompts(o, model.config);
  const AdapterWeights<Real> init = o.adapter.empty() ? init_adapter(model, o.seed) : load_adapter_for<Real>(o, model);
  TrainConfig cfg = o.train;
  cfg.seed = o.seed;
  const TrainResult<Real> r = train_adapter(model, init, corpus, cfg);
  if (o.out.empty() || o.out == "-") throw ConfigError("train needs --out for the adapter file");
  save_adapter(r.adapter, o.out);
  std::ostringstream csv;
  csv.precision(10);
  csv << "epoch,loss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) csv << e + 1 << ',' << r.epoch_loss[e] << '\n';
  emit(o.loss_out.empty() ? o.out + ".loss.csv" : o.loss_out, csv.str());
  std::cout << "epoch 1 loss " << r.epoch_loss.front() << ", epoch " << r.epoch_loss.size() << " loss " << r.epoch_loss.back() << "\n";
  return kExitOk;
}

template <typename Real>
int run_calibrate(const Options& o) {
  const auto model = load_model<Real>(o);
  const auto adapter = load_adapter_for<Real>(o, model);
  const LatencyModel lat = calibrate_latency(model, adapter, {1, 2, 4, 6});
  emit(o.out, latency_json(lat).dump(2) + "\n");
  return kExitOk;
}

int run_gen_model(const Options& o) {
  if (o.out.empty() || o.out == "-") throw ConfigError("gen-model needs --out");
  ModelConfig c = o.config;
  if (o.exit_layer) c.exit_layer = *o.exit_layer;
  save_weights(gen_model<float>(c, o.seed, o.init), o.out);
  return kExitOk;
}

int run_gen_corpus(const Options& o) {
  emit(o.out, format_corpus(gen_corpus(o.vocab, o.n_seqs, o.min_len, o.max_len, o.seed)));
  return kExitOk;
}

int run_init_adapter(const Options& o) {
  if (o.out.empty() || o.out == "-") throw ConfigError("init-adapter needs --out");
  const auto model = load_model<float>(o);
  save_adapter(o.passthrough ? passthrough_adapter(model) : init_adapter(model, o.seed), o.out);
  return kExitOk;
}

int run_params(const Options& o) {
  const std::uint64_t d = o.config.d_model, v = o.config.vocab_size, h = o.config.ffn_hidden;
  nlohmann::json j = nlohmann::json::array();
  for (const AdapterVariant var : {AdapterVariant{AdapterKind::Kangaroo}, AdapterVariant{AdapterKind::KangarooPlusHead},
                                   AdapterVariant{AdapterKind::OneLayerTransformer}, AdapterVariant{AdapterKind::MlpOnly},
                                   AdapterVariant::medusa(4)}) {
    j.push_back({{"variant", variant_name(var)}, {"params", count_params(d, v, h, var)}});
  }
  emit(o.out, j.dump(2) + "\n");
  return kExitOk;
}

template <typename Real>
int dispatch_typed(const std::string& cmd, const Options& o) {
  if (cmd == "bench") return run_bench<Real>(o);
  if (cmd == "verify-lossless") return run_verify<Real>(o);
  if (cmd == "sweep") return run_sweep<Real>(o);
  if (cmd == "train") return run_train<Real>(o);
  if (cmd == "calibrate") return run_calibrate<Real>(o);
  throw ConfigError("unknown subcommand " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Self-speculative decoding with a shallow sub-network and adapter"};
  app.require_subcommand(1);

  auto add_model = [&](CLI::App* s) { s->add_option("--model", o.model, "Model weights file"); };
  auto add_adapter = [&](CLI::App* s) { s->add_option("--adapter", o.adapter, "Adapter weights file"); };
  auto add_corpus = [&](CLI::App* s) { s->add_option("--corpus", o.corpus, "Corpus file, one sequence of token ids per line"); };
  auto add_common = [&](CLI::App* s) {
    s->add_option("--exit-layer", o.exit_layer, "Override the early exit layer");
    s->add_option("--n-tokens", o.n_tokens, "Tokens to generate per prompt")->capture_default_str();
    s->add_option("--seed", o.seed, "Seed")->capture_default_str();
    s->add_option("--out", o.out, "Output path, - for stdout")->capture_default_str();
    s->add_flag("--f64", o.f64, "Compute in 64-bit floating point");
    s->add_option("--max-prompt", o.max_prompt, "Truncate prompts to this many tokens (0 keeps them whole)");
  };
  auto add_latency = [&](CLI::App* s) {
    s->add_flag("--calibrate", o.calibrate, "Fit the latency model by timing micro-runs");
    auto* g = s->add_option_group("latency", "Explicit latency model (overrides --calibrate)");
    g->add_option("--c-big", o.latency.c_big)->each([&](const std::string&) { o.latency_set = true; });
    g->add_option("--c-shallow", o.latency.c_shallow)->each([&](const std::string&) { o.latency_set = true; });
    g->add_option("--c-adapter", o.latency.c_adapter)->each([&](const std::string&) { o.latency_set = true; });
    g->add_option("--c-overhead", o.latency.c_overhead)->each([&](const std::string&) { o.latency_set = true; });
  };
  auto add_timing = [&](CLI::App* s) {
    s->add_option("--reps", o.reps, "Timed repetitions per measurement (min 3)")->capture_default_str();
    s->add_flag("--no-timing", o.no_timing, "Skip walltime measurement");
  };
  auto add_grid = [&](CLI::App* s) {
    s->add_option("--etas", o.etas, "Comma-separated eta grid")->delimiter(',')->capture_default_str();
    s->add_option("--gammas", o.gammas, "Comma-separated gamma grid")->delimiter(',')->capture_default_str();
  };
  auto add_fault = [&](CLI::App* s) {
    // Negative-control hook for tests; not part of the public interface.
    s->add_flag("--inject-accept-extra", o.fault_accept_extra)->group("");
  };

  auto* gm = app.add_subcommand("gen-model", "Write a seeded synthetic target model");
  gm->add_option("--vocab", o.config.vocab_size)->capture_default_str();
  gm->add_option("--d-model", o.config.d_model)->capture_default_str();
  gm->add_option("--heads", o.config.n_heads)->capture_default_str();
  gm->add_option("--head-dim", o.config.head_dim)->capture_default_str();
  gm->add_option("--layers", o.config.n_layers)->capture_default_str();
  gm->add_option("--ffn", o.config.ffn_hidden)->capture_default_str();
  gm->add_option("--max-seq", o.config.max_seq_len)->capture_default_str();
  gm->add_option("--rope-theta", o.config.rope_theta)->capture_default_str();
  gm->add_option("--logit-gain", o.init.logit_gain)->capture_default_str();
  gm->add_option("--embedding-scale", o.init.embedding_scale)->capture_default_str();
  gm->add_flag("--passthrough", o.init.residual_passthrough, "Zero every block so the model is embedding -> head");
  gm->add_option("--exit-layer", o.exit_layer, "Early exit layer l");
  gm->add_option("--seed", o.seed)->capture_default_str();
  gm->add_option("--out", o.out)->required();

  auto* gc = app.add_subcommand("gen-corpus", "Write a seeded order-2 Markov corpus");
  gc->add_option("--n-seqs", o.n_seqs)->capture_default_str();
  gc->add_option("--min-len", o.min_len)->capture_default_str();
  gc->add_option("--max-len", o.max_len)->capture_default_str();
  gc->add_option("--vocab", o.vocab)->capture_default_str();
  gc->add_option("--seed", o.seed)->capture_default_str();
  gc->add_option("--out", o.out)->capture_default_str();

  auto* ia = app.add_subcommand("init-adapter", "Write an untrained adapter");
  add_model(ia);
  ia->add_flag("--passthrough", o.passthrough, "Zero attention, output norm copied from the model");
  ia->add_option("--seed", o.seed)->capture_default_str();
  ia->add_option("--out", o.out)->required();

  auto* tr = app.add_subcommand("train", "Distill the adapter from the frozen model");
  add_model(tr);
  add_corpus(tr);
  add_common(tr);
  tr->add_option("--adapter", o.adapter, "Start from this adapter instead of a seeded init");
  tr->add_option("--loss-out", o.loss_out, "Per-epoch loss CSV (default <out>.loss.csv)");
  tr->add_option("--epochs", o.train.epochs)->capture_default_str();
  tr->add_option("--lr", o.train.learning_rate)->capture_default_str();
  tr->add_option("--weight-decay", o.train.weight_decay)->capture_default_str();
  tr->add_option("--batch", o.train.batch)->capture_default_str();

  auto* be = app.add_subcommand("bench", "Compare against vanilla decoding and report CR / CTAR / speedup");
  add_model(be);
  add_adapter(be);
  add_corpus(be);
  add_common(be);
  add_latency(be);
  add_timing(be);
  add_fault(be);
  be->add_option("--eta", o.eta, "Confidence threshold")->capture_default_str();
  be->add_option("--gamma", o.gamma, "Maximum drafts per round")->capture_default_str();
  be->add_option("--format", o.format)->check(CLI::IsMember({"json", "csv"}))->capture_default_str();

  auto* vl = app.add_subcommand("verify-lossless", "Check token-exact agreement with vanilla decoding over a policy grid");
  add_model(vl);
  add_adapter(vl);
  add_corpus(vl);
  add_common(vl);
  add_grid(vl);
  add_fault(vl);

  auto* sw = app.add_subcommand("sweep", "Run the engine over an eta x gamma grid and write CSV");
  add_model(sw);
  add_adapter(sw);
  add_corpus(sw);
  add_common(sw);
  add_grid(sw);
  add_latency(sw);
  add_timing(sw);

  auto* ca = app.add_subcommand("calibrate", "Fit the four-term latency model on this machine");
  add_model(ca);
  add_adapter(ca);
  ca->add_option("--out", o.out)->capture_default_str();

  auto* pc = app.add_subcommand("params", "Adapter parameter counts for a given width");
  pc->add_option("--d-model", o.config.d_model)->capture_default_str();
  pc->add_option("--vocab", o.config.vocab_size)->capture_default_str();
  pc->add_option("--ffn", o.config.ffn_hidden)->capture_default_str();
  pc->add_option("--out", o.out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "gen-model") return run_gen_model(o);
    if (cmd == "gen-corpus") return run_gen_corpus(o);
    if (cmd == "init-adapter") return run_init_adapter(o);
    if (cmd == "params") return run_params(o);
    return o.f64 ? dispatch_typed<double>(cmd, o) : dispatch_typed<float>(cmd, o);
  } catch (const VerificationFailure& e) {
    std::cerr << e.what() << "\n";
    return kExitVerifyFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
