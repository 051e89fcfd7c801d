// Acceptance run: one PASS/FAIL line per criterion.
//
// usage: nao_acceptance <path-to-nao-cli> <scratch-dir> [criterion ...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nao/arch_space.hpp"
#include "nao/audio_frontend.hpp"
#include "nao/child_network.hpp"
#include "nao/errors.hpp"
#include "nao/evaluators.hpp"
#include "nao/gradient_check.hpp"
#include "nao/search_engine.hpp"
#include "nao/surrogate.hpp"

namespace fs = std::filesystem;
using namespace nao;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string search_log_text(const SearchResult& r, const fs::path& path) {
  write_search_log(path.string(), r, {"acceptance"});
  return slurp(path);
}

// Scoring formula evaluated directly on the cell structure.
double reference_oracle(const Architecture& a) {
  auto conv_frac = [](const Cell& c) {
    int k = 0;
    for (const auto& n : c.nodes()) k += is_conv(n.first.op) + is_conv(n.second.op);
    return k / (2.0 * c.num_intermediate());
  };
  const Cell& nc = a.normal();
  std::vector<int> depth(static_cast<std::size_t>(nc.last_index() + 1), 0);
  std::set<int> consumed;
  for (int node = 2; node <= nc.last_index(); ++node) {
    const auto& in = nc.node(node);
    depth[node] = 1 + std::max(depth[in.first.source], depth[in.second.source]);
    consumed.insert(in.first.source);
    consumed.insert(in.second.source);
  }
  int d = 0;
  for (int node = 0; node <= nc.last_index(); ++node)
    if (!consumed.count(node)) d = std::max(d, depth[node]);
  return 0.5 * conv_frac(nc) + 0.3 * d / nc.num_intermediate() + 0.2 * conv_frac(a.reduction());
}

std::vector<TrainPair> oracle_pool(int b, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> seqs;
  std::vector<double> raw;
  while (static_cast<int>(seqs.size()) < n) {
    const Architecture a = random_architecture(rng, b);
    TokenSequence s = encode_tokens(a);
    if (std::find(seqs.begin(), seqs.end(), s) != seqs.end()) continue;
    seqs.push_back(std::move(s));
    raw.push_back(reference_oracle(a));
  }
  const double lo = *std::min_element(raw.begin(), raw.end());
  const double hi = *std::max_element(raw.begin(), raw.end());
  std::vector<TrainPair> pairs;
  for (int i = 0; i < n; ++i) {
    const float y = hi > lo ? static_cast<float>((raw[i] - lo) / (hi - lo)) : 0.5F;
    pairs.push_back({seqs[i], y});
  }
  return pairs;
}

// ---------------------------------------------------------------------------

Outcome codec_soundness() {
  Rng rng(2024);
  int failures = 0;
  for (int i = 0; i < 10000; ++i) {
    const Architecture a = random_architecture(rng, 5);
    try {
      if (!(decode_tokens(encode_tokens(a)) == a)) ++failures;
    } catch (const GrammarError&) {
      ++failures;
    }
  }
  std::uniform_int_distribution<int> tok(0, kVocabSize - 1);
  int repaired = 0, rejected = 0, round_trips = 0;
  for (int i = 0; i < 10000; ++i) {
    TokenSequence seq = encode_tokens(random_architecture(rng, 5));
    std::uniform_int_distribution<std::size_t> pos(0, seq.size() - 1);
    seq.tokens[pos(rng)] = static_cast<Token>(tok(rng));
    try {
      if (encode_tokens(decode_tokens(seq)) == seq)
        ++round_trips;
      else
        ++repaired;
    } catch (const GrammarError&) {
      ++rejected;
    }
  }
  return {failures == 0 && repaired == 0,
          "round-trip failures " + std::to_string(failures) + "/10000; mutated: " + std::to_string(round_trips) +
              " round-trip, " + std::to_string(rejected) + " rejected, " + std::to_string(repaired) +
              " silently repaired"};
}

Outcome gradient_correctness() {
  bool ok = true;
  double worst = 0;
  std::string worst_kind;
  for (LayerKind kind : all_layer_kinds()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const GradientCheckResult r = gradient_check(kind, seed);
      const double ratio = r.max_relative_error / gradient_tolerance(kind);
      if (r.max_relative_error >= gradient_tolerance(kind) || r.checked == 0) ok = false;
      if (ratio > worst) {
        worst = ratio;
        worst_kind = std::string(layer_kind_name(kind)) + " seed " + std::to_string(seed) + " err " +
                     fmt("%.2e", r.max_relative_error);
      }
    }
  }
  return {ok, std::to_string(all_layer_kinds().size()) + " layer kinds x 5 seeds; worst " + worst_kind};
}

struct SurrogateRun {
  std::string curve_text;
  double initial = 0, final = 0, recon = 0;
};

SurrogateRun surrogate_fit_run() {
  const auto pairs = oracle_pool(5, 50, 404);
  SurrogateModel m(5, 405);
  std::ostringstream curve;
  const auto losses = train_surrogate(m, pairs, {}, [&](int epoch, const JointLoss& l) {
    curve << epoch << ',' << fmt("%.17g", l.total) << ',' << fmt("%.17g", l.pred) << ',' << fmt("%.17g", l.rec)
          << '\n';
  });
  SurrogateRun r;
  r.initial = losses.front().total;
  r.final = loss_joint(m, pairs).total;
  r.recon = reconstruction_accuracy(m, pairs);
  r.curve_text = curve.str() + fmt("final %.17g", r.final) + fmt(" recon %.17g", r.recon);
  return r;
}

SurrogateRun g_surrogate_first;

Outcome surrogate_fitting() {
  g_surrogate_first = surrogate_fit_run();
  const SurrogateRun& r = g_surrogate_first;
  const double reduction = 1.0 - r.final / r.initial;
  return {reduction >= 0.9 && r.recon >= 0.95,
          "joint loss " + fmt("%.4f", r.initial) + " -> " + fmt("%.4f", r.final) + " (" +
              fmt("%.1f", 100 * reduction) + "% reduction), reconstruction " + fmt("%.1f", 100 * r.recon) + "%"};
}

Outcome constrained_decoding() {
  SurrogateModel m(5, 77);
  std::mt19937_64 rng(78);
  std::normal_distribution<float> nd;
  const int steps = static_cast<int>(m.sequence_length());
  const int dim = m.dims().hidden;
  int failures = 0;
  std::vector<LatentCode> batch;
  auto flush = [&] {
    for (const Decoded& d : decode_greedy_batch(m, batch)) {
      try {
        if (!(encode_tokens(decode_tokens(d.seq)) == d.seq)) ++failures;
      } catch (const GrammarError&) {
        ++failures;
      }
    }
    batch.clear();
  };
  for (int i = 0; i < 10000; ++i) {
    LatentCode c{steps, dim, std::vector<float>(static_cast<std::size_t>(steps) * dim)};
    for (auto& v : c.hidden) v = nd(rng);
    batch.push_back(std::move(c));
    if (batch.size() == 500) flush();
  }
  flush();
  return {failures == 0, std::to_string(failures) + "/10000 ungrammatical decodes"};
}

SearchConfig efficacy_config(std::uint64_t seed) {
  SearchConfig cfg;
  cfg.num_intermediate = 1;
  cfg.initial_pool_size = 20;
  cfg.iterations = 3;
  cfg.seed = seed;
  return cfg;
}

std::vector<std::string> g_efficacy_logs;

Outcome search_efficacy(const fs::path& scratch) {
  std::vector<double> all;
  ArchitectureEnumerator it(1);
  while (auto a = it.next()) all.push_back(reference_oracle(*a));
  std::sort(all.begin(), all.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(all.size()))) - 1;
  const double p99 = all[rank];

  const OracleEvaluator oracle;
  int hits = 0;
  bool monotone = true, consistent = true;
  std::string scores;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SearchResult r = run_search(efficacy_config(seed), oracle);
    g_efficacy_logs.push_back(search_log_text(r, scratch / ("efficacy_" + std::to_string(seed) + ".csv")));
    if (std::abs(reference_oracle(r.best) - r.best_score) > 1e-12) consistent = false;
    if (r.best_score >= p99) ++hits;
    for (std::size_t i = 1; i < r.iterations.size(); ++i)
      if (r.iterations[i].best_score < r.iterations[i - 1].best_score) monotone = false;
    scores += (seed ? " " : "") + fmt("%.3f", r.best_score);
  }
  return {hits >= 4 && monotone && consistent, "p99 " + fmt("%.3f", p99) + ", best per seed [" + scores + "], " +
                                     std::to_string(hits) + "/5 at or above p99, nondecreasing " +
                                     (monotone ? "yes" : "no")};
}

Outcome mfcc_contract() {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd(0.0F, 0.1F);
  std::vector<float> x(kClipSamples);
  for (auto& v : x) v = nd(rng);
  const FeatureMap f = compute_mfcc(x);
  const bool shape = f.size() == 98u * 40u;

  const FeatureMap z = compute_mfcc(std::vector<float>(kClipSamples, 0.0F));
  const double c0 = std::sqrt(1.0 / 40.0) * 40.0 * std::log(1e-10);
  double zero_err = 0;
  for (int t = 0; t < 98; ++t) {
    zero_err = std::max(zero_err, std::abs(z[t * 40] - c0) / std::abs(c0));
    for (int k = 1; k < 40; ++k) zero_err = std::max(zero_err, static_cast<double>(std::abs(z[t * 40 + k])));
  }

  std::vector<float> delayed(kClipSamples, 0.0F);
  std::copy(x.begin(), x.end() - kHopSamples, delayed.begin() + kHopSamples);
  const FeatureMap g = compute_mfcc(delayed);
  double shift_err = 0;
  for (int t = 0; t + 1 < 98; ++t)
    for (int k = 0; k < 40; ++k)
      shift_err = std::max(shift_err, static_cast<double>(std::abs(g[(t + 1) * 40 + k] - f[t * 40 + k])));
  return {shape && zero_err < 1e-5 && shift_err < 1e-5,
          "shape " + std::string(shape ? "98x40" : "wrong") + ", silence max deviation " +
              fmt("%.1e", zero_err) + ", delay shift max error " + fmt("%.1e", shift_err)};
}

Architecture conv_architecture(Rng& rng) {
  for (;;) {
    Architecture a = random_architecture(rng, 5);
    for (const Cell* c : {&a.normal(), &a.reduction()})
      for (const auto& n : c->nodes())
        if (is_conv(n.first.op) || is_conv(n.second.op)) return a;
  }
}

// A single 3x3 sep-conv edge; every other edge is a pool or identity.
Architecture minimal_conv_architecture() {
  std::vector<NodeInputs> normal, reduction;
  normal.push_back({{0, OpKind::SepConv3x3}, {1, OpKind::MaxPool3x3}});
  reduction.push_back({{0, OpKind::AvgPool3x3}, {1, OpKind::Identity}});
  for (int node = 3; node <= 6; ++node) {
    normal.push_back({{node - 1, OpKind::Identity}, {0, OpKind::AvgPool3x3}});
    reduction.push_back({{node - 1, OpKind::MaxPool3x3}, {1, OpKind::Identity}});
  }
  return Architecture(Cell(normal), Cell(reduction));
}

std::string g_pipeline_dir;

Outcome toy_kws(const std::string& cli, const fs::path& scratch) {
  const FeatureDataset data = synthetic_two_tone_dataset(100, 8);
  Rng rng(31);
  std::vector<Architecture> archs{minimal_conv_architecture(), conv_architecture(rng), conv_architecture(rng)};
  NetworkConfig cfg;
  cfg.num_cells = 3;
  cfg.channels = 8;
  cfg.epochs = 5;
  cfg.num_classes = data.num_classes();
  bool ok = true;
  std::string accs;
  for (std::size_t i = 0; i < archs.size(); ++i) {
    cfg.seed = 100 + i;
    ChildNetwork net = build_network(archs[i], cfg);
    double best = 0;
    for (const auto& s : train_network(net, data)) best = std::max(best, s.val_acc);
    if (best < 0.95) ok = false;
    accs += (i ? " " : "") + fmt("%.3f", best);
  }

  const fs::path config = scratch / "pipeline.json";
  std::ofstream(config) << R"({"seed": 3, "evaluator": "kws-synthetic",
  "search": {"iterations": 1, "initial_pool_size": 6}})";
  const fs::path out = scratch / "pipeline";
  fs::remove_all(out);
  const std::string cmd = "\"" + cli + "\" search --config \"" + config.string() + "\" --out \"" + out.string() +
                          "\" > \"" + (scratch / "pipeline.stdout").string() + "\" 2>&1";
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = std::system(cmd.c_str());
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
  bool artifacts = true;
  for (const char* f : {"best.json", "pool.jsonl", "search_log.csv"})
    if (!fs::exists(out / f) || fs::file_size(out / f) == 0) artifacts = false;
  g_pipeline_dir = out.string();
  const bool pipeline_ok = rc == 0 && artifacts && minutes < 30;
  return {ok && pipeline_ok, "3-cell 8-channel best val acc [" + accs + "] after 5 epochs; pipeline exit " +
                                 std::to_string(rc) + ", artifacts " + (artifacts ? "written" : "missing") + ", " +
                                 fmt("%.1f", minutes) + " min"};
}

Outcome determinism(const std::string& cli, const fs::path& scratch) {
  std::vector<std::string> diffs;
  if (g_surrogate_first.curve_text.empty()) g_surrogate_first = surrogate_fit_run();
  if (surrogate_fit_run().curve_text != g_surrogate_first.curve_text) diffs.push_back("surrogate");

  const OracleEvaluator oracle;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::string first =
        seed < g_efficacy_logs.size()
            ? g_efficacy_logs[seed]
            : search_log_text(run_search(efficacy_config(seed), oracle), scratch / "efficacy_a.csv");
    const std::string again = search_log_text(run_search(efficacy_config(seed), oracle), scratch / "efficacy_b.csv");
    if (first != again) diffs.push_back("search seed " + std::to_string(seed));
  }

  if (g_pipeline_dir.empty()) toy_kws(cli, scratch);
  const fs::path first_dir = scratch / "pipeline_first";
  fs::remove_all(first_dir);
  fs::rename(g_pipeline_dir, first_dir);
  toy_kws(cli, scratch);
  for (const char* f : {"best.json", "pool.jsonl", "search_log.csv"})
    if (slurp(first_dir / f) != slurp(fs::path(g_pipeline_dir) / f)) diffs.push_back(std::string("pipeline ") + f);

  std::string detail = "surrogate loss curve, 5 search logs, pipeline artifacts: ";
  if (diffs.empty()) return {true, detail + "byte-identical"};
  for (const auto& d : diffs) detail += d + "; ";
  return {false, detail + "differ"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: nao_acceptance <nao-cli> <scratch-dir> [criterion ...]\n";
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path scratch = argv[2];
  fs::create_directories(scratch);
  std::set<int> only;
  for (int i = 3; i < argc; ++i) only.insert(std::atoi(argv[i]));

  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0 = no limit
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {2, "codec soundness", 10, codec_soundness},
      {3, "gradient correctness", 120, gradient_correctness},
      {4, "surrogate fitting", 600, surrogate_fitting},
      {5, "constrained decoding", 0, constrained_decoding},
      {6, "search efficacy vs brute force", 900, [&] { return search_efficacy(scratch); }},
      {7, "MFCC contract", 0, mfcc_contract},
      {8, "end-to-end toy KWS", 0, [&] { return toy_kws(cli, scratch); }},
      {9, "determinism", 0, [&] { return determinism(cli, scratch); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += "; exceeded " + fmt("%.0f", c.limit_s) + " s";
    }
    if (!o.pass) ++failed;
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << ": " << o.detail
              << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
