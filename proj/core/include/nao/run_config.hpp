#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nao/child_network.hpp"
#include "nao/evaluators.hpp"
#include "nao/search_engine.hpp"

namespace nao {

std::string_view tool_version();

enum class EvaluatorKind { Oracle, KwsSynthetic, KwsSpeech };
std::string_view evaluator_name(EvaluatorKind k);
/// Throws ConfigError for unknown names.
EvaluatorKind parse_evaluator(std::string_view name);

struct DataConfig {
  std::string cache;               // feature cache stem for kws-speech / train / eval
  int synthetic_per_class = 50;    // two-tone dataset size for kws-synthetic
  std::uint64_t synthetic_seed = 1;
};

/// Everything a run needs. Parsed from JSON with unknown keys rejected.
///
/// {
///   "seed": 0,
///   "evaluator": "oracle" | "kws-synthetic" | "kws-speech",
///   "search": {"iterations", "initial_pool_size", "B", "surrogate_epochs", "surrogate_lr",
///              "lambda", "ascent_etas", "ascent_steps", "ascend_fraction", "workers"},
///   "search_network": {"L", "C", "epochs", "batch_size", "lr", "momentum", "weight_decay"},
///   "network": { same keys as search_network },
///   "data": {"cache", "synthetic_per_class", "synthetic_seed"}
/// }
struct RunConfig {
  std::uint64_t seed = 0;
  EvaluatorKind evaluator = EvaluatorKind::Oracle;
  SearchConfig search{};
  NetworkConfig search_network = search_network_config(12, 0);
  NetworkConfig network{};
  DataConfig data{};

  RunConfig();
  /// Pushes `seed` into the search and both network configs.
  void apply_seed(std::uint64_t s);
  /// Throws ConfigError on any out-of-range value.
  void validate() const;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
/// Fully resolved config as compact JSON with a fixed key order.
std::string to_json_text(const RunConfig& cfg);
/// 16 hex digits identifying the resolved config.
std::string config_hash(const RunConfig& cfg);

/// "nao <version> config_hash=<hash> seed=<seed>" followed by "config <json>".
std::vector<std::string> provenance_header(const RunConfig& cfg);
/// The same facts as a JSON object text.
std::string provenance_json(const RunConfig& cfg);

/// Dataset selected by the config: synthetic two-tone or the feature cache.
/// Throws IoError naming the cache path when it is missing.
std::shared_ptr<const FeatureDataset> load_dataset(const RunConfig& cfg, bool synthetic);
std::unique_ptr<ArchEvaluator> make_evaluator(const RunConfig& cfg);

}  // namespace nao
