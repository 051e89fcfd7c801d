// nao: command-line front end for search, training and the codec utilities.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "nao/arch_space.hpp"
#include "nao/audio_frontend.hpp"
#include "nao/child_network.hpp"
#include "nao/errors.hpp"
#include "nao/evaluators.hpp"
#include "nao/run_config.hpp"
#include "nao/search_engine.hpp"

namespace fs = std::filesystem;
using namespace nao;

namespace {

RunConfig resolve_config(const std::string& path) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  if (const char* env = std::getenv("NAO_SEED")) {
    char* end = nullptr;
    const unsigned long long s = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ConfigError(std::string("NAO_SEED must be an unsigned integer, got '") + env + "'");
    cfg.apply_seed(s);
  }
  cfg.validate();
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// -- preprocess --------------------------------------------------------------

struct PreprocessArgs {
  std::string data_dir, version = "v2", out;
  int synthetic = 0;
  std::uint64_t seed = 0;
};

int cmd_preprocess(const PreprocessArgs& a) {
  FeatureDataset ds;
  if (a.synthetic > 0) {
    ds = synthetic_two_tone_dataset(a.synthetic, a.seed);
  } else {
    if (a.data_dir.empty()) throw ConfigError("preprocess needs --data-dir or --synthetic");
    if (a.version != "v1" && a.version != "v2") throw ConfigError("--version must be v1 or v2");
    ds = assemble_speech_dataset(a.data_dir, a.version == "v1" ? SpeechVersion::V1 : SpeechVersion::V2, a.seed);
  }
  cache_features(ds, a.out);
  const auto paths = cache_split_paths(a.out);
  std::cout << "train " << ds.train.size() << " -> " << paths[0] << "\n"
            << "validation " << ds.validation.size() << " -> " << paths[1] << "\n"
            << "test " << ds.test.size() << " -> " << paths[2] << "\n";
  return 0;
}

// -- search ------------------------------------------------------------------

struct SearchArgs {
  std::string config, out = ".", evaluator;
  int workers = 0;
};

int cmd_search(const SearchArgs& a) {
  RunConfig cfg = resolve_config(a.config);
  if (!a.evaluator.empty()) cfg.evaluator = parse_evaluator(a.evaluator);
  if (a.workers > 0) cfg.search.worker_limit = a.workers;
  cfg.validate();
  ensure_dir(a.out);
  const auto evaluator = make_evaluator(cfg);
  SearchHooks hooks;
  hooks.on_iteration = [](const IterationSummary& s) {
    std::cerr << "iteration " << s.iteration << ": evaluated " << s.evaluated << ", best " << format_score(s.best_score);
    if (s.proposals > 0) std::cerr << ", proposals " << s.proposals;
    std::cerr << "\n";
  };
  const SearchResult r = run_search(cfg.search, *evaluator, hooks);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";

  nlohmann::ordered_json best = nlohmann::ordered_json::parse(to_json_text(r.best));
  best["score"] = r.best_score;
  best["run"] = nlohmann::ordered_json::parse(provenance_json(cfg));
  std::ofstream(fs::path(a.out) / "best.json") << best.dump() << "\n";
  write_pool_jsonl((fs::path(a.out) / "pool.jsonl").string(), r, provenance_json(cfg));
  write_search_log((fs::path(a.out) / "search_log.csv").string(), r, provenance_header(cfg));
  if (!fs::exists(fs::path(a.out) / "best.json")) throw IoError("failed to write best.json in " + a.out);
  std::cout << "best score " << format_score(r.best_score) << " (" << r.pool.size() << " architectures evaluated)\n";
  return 0;
}

// -- train / eval --------------------------------------------------------------

struct TrainArgs {
  std::string arch, config, out = ".";
  bool synthetic = false;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig cfg = resolve_config(a.config);
  const Architecture arch = load_architecture(a.arch);
  const auto data = load_dataset(cfg, a.synthetic);
  NetworkConfig net_cfg = cfg.network;
  net_cfg.num_classes = data->num_classes();
  ensure_dir(a.out);
  ChildNetwork net = build_network(arch, net_cfg);
  std::cerr << "parameters " << count_params(net) << "\n";
  const auto history = train_network(net, *data, [](const EpochStats& s) {
    std::cerr << "epoch " << s.epoch << " loss " << format_score(s.train_loss) << " val_acc " << format_score(s.val_acc)
              << "\n";
  });
  save_network(net, (fs::path(a.out) / "child.ckpt").string());
  write_history_csv((fs::path(a.out) / "history.csv").string(), history, provenance_header(cfg));
  std::cout << "validation accuracy " << format_score(evaluate_network(net, data->validation)) << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, cache, split = "test";
};

int cmd_eval(const EvalArgs& a) {
  ChildNetwork net = load_network(a.checkpoint);
  for (const auto& p : cache_split_paths(a.cache)) {
    if (!fs::exists(p)) throw IoError("feature cache not found: " + p);
  }
  const FeatureDataset ds = load_cache(a.cache);
  const FeatureSplit* split = a.split == "train" ? &ds.train : a.split == "validation" ? &ds.validation : &ds.test;
  if (ds.num_classes() > net.config().num_classes) {
    throw ConfigError("cache has more classes than the checkpoint's classifier");
  }
  std::cout << a.split << " accuracy " << format_score(evaluate_network(net, *split)) << " (" << split->size()
            << " items)\n";
  return 0;
}

// -- utilities -----------------------------------------------------------------

int cmd_codec_check(int n, std::uint64_t seed, int b) {
  Rng rng(seed);
  int ok = 0;
  for (int i = 0; i < n; ++i) {
    const Architecture arch = random_architecture(rng, b);
    try {
      if (decode_tokens(encode_tokens(arch)) == arch) ++ok;
    } catch (const GrammarError&) {
    }
  }
  std::cout << ok << "/" << n << " ok\n";
  return ok == n ? 0 : 1;
}

int cmd_export_dot(const std::string& arch_path, const std::string& out) {
  const std::string dot = "// nao " + std::string(tool_version()) + " export-dot " + arch_path + "\n" +
                          to_dot(load_architecture(arch_path));
  if (out.empty() || out == "-") {
    std::cout << dot;
  } else {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out);
    f << dot;
  }
  return 0;
}

int cmd_enumerate(int b, const std::string& out) {
  ArchitectureEnumerator it(b);
  std::vector<std::pair<std::string, double>> rows;
  double best = -1;
  std::size_t best_row = 0;
  while (auto a = it.next()) {
    const double s = synthetic_oracle(*a);
    if (s > best) {
      best = s;
      best_row = rows.size();
    }
    rows.emplace_back(dedup_key(encode_tokens(*a)), s);
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw IoError("cannot write " + out);
  f << "# nao " << tool_version() << " enumerate B=" << b << " evaluator=oracle\n";
  f << "arch_id,score,is_best\n";
  char buf[32];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", rows[i].second);
    f << rows[i].first << ',' << buf << ',' << (i == best_row ? 1 : 0) << '\n';
  }
  std::cout << rows.size() << " architectures, best score " << format_score(best) << " at row " << best_row + 1
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural architecture optimization for keyword spotting"};
  app.set_version_flag("--version-info", std::string(tool_version()));
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Extract MFCC features into a binary cache");
  p->add_option("--data-dir", pre.data_dir, "Speech Commands root directory");
  p->add_option("--version", pre.version, "Dataset version (v1 or v2)")->check(CLI::IsMember({"v1", "v2"}));
  p->add_option("--synthetic", pre.synthetic, "Generate the two-tone dataset with N items per class instead");
  p->add_option("--seed", pre.seed, "Seed for subsampling and synthetic data");
  p->add_option("--out", pre.out, "Cache path (split files are derived from it)")->required();

  SearchArgs sa;
  auto* s = app.add_subcommand("search", "Run the architecture search");
  s->add_option("--config", sa.config, "Run config JSON");
  s->add_option("--out", sa.out, "Output directory");
  s->add_option("--evaluator", sa.evaluator, "oracle, kws-synthetic or kws-speech")
      ->check(CLI::IsMember({"oracle", "kws-synthetic", "kws-speech"}));
  s->add_option("--workers", sa.workers, "Concurrent evaluations")->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train a child network from an architecture file");
  t->add_option("--arch", ta.arch, "Architecture JSON")->required();
  t->add_option("--config", ta.config, "Run config JSON");
  t->add_option("--out", ta.out, "Output directory");
  t->add_flag("--synthetic", ta.synthetic, "Train on the two-tone dataset instead of data.cache");

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "Evaluate a trained checkpoint on a feature cache");
  e->add_option("--checkpoint", ea.checkpoint, "Checkpoint written by train")->required();
  e->add_option("--cache", ea.cache, "Feature cache path")->required();
  e->add_option("--split", ea.split, "train, validation or test")
      ->check(CLI::IsMember({"train", "validation", "test"}));

  int cc_n = 10000, cc_b = 5;
  std::uint64_t cc_seed = 0;
  auto* c = app.add_subcommand("codec-check", "Round-trip random architectures through the token codec");
  c->add_option("n", cc_n, "Number of architectures");
  c->add_option("--seed", cc_seed, "Sampling seed");
  c->add_option("-B,--nodes", cc_b, "Intermediate nodes per cell")->check(CLI::Range(1, kMaxNodes));

  std::string dot_arch, dot_out;
  auto* d = app.add_subcommand("export-dot", "Write both cells as Graphviz DOT");
  d->add_option("arch", dot_arch, "Architecture JSON")->required();
  d->add_option("--out", dot_out, "Output file (stdout when omitted)");

  int en_b = 1;
  std::string en_out = "enumeration.csv";
  auto* n = app.add_subcommand("enumerate", "Score every architecture of a small space with the oracle");
  n->add_option("-B,--nodes", en_b, "Intermediate nodes per cell (1 or 2)");
  n->add_option("--out", en_out, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*p) return cmd_preprocess(pre);
    if (*s) return cmd_search(sa);
    if (*t) return cmd_train(ta);
    if (*e) return cmd_eval(ea);
    if (*c) return cmd_codec_check(cc_n, cc_seed, cc_b);
    if (*d) return cmd_export_dot(dot_arch, dot_out);
    if (*n) return cmd_enumerate(en_b, en_out);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
