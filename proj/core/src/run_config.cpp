#include "nao/run_config.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nao/errors.hpp"
#include "nao/seed.hpp"

#ifndef NAO_VERSION
#define NAO_VERSION "0.0.0"
#endif

namespace nao {

using ojson = nlohmann::ordered_json;

std::string_view tool_version() { return NAO_VERSION; }

std::string_view evaluator_name(EvaluatorKind k) {
  switch (k) {
    case EvaluatorKind::Oracle: return "oracle";
    case EvaluatorKind::KwsSynthetic: return "kws-synthetic";
    case EvaluatorKind::KwsSpeech: return "kws-speech";
  }
  return "oracle";
}

EvaluatorKind parse_evaluator(std::string_view name) {
  if (name == "oracle") return EvaluatorKind::Oracle;
  if (name == "kws-synthetic") return EvaluatorKind::KwsSynthetic;
  if (name == "kws-speech") return EvaluatorKind::KwsSpeech;
  throw ConfigError("unknown evaluator '" + std::string(name) + "' (expected oracle, kws-synthetic or kws-speech)");
}

RunConfig::RunConfig() {
  network.num_cells = 12;
  network.channels = 16;
  network.epochs = 200;
  network.batch_size = 128;
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  search.seed = s;
  search_network.seed = s;
  network.seed = s;
}

void RunConfig::validate() const {
  search.validate();
  search_network.validate();
  network.validate();
  if (data.synthetic_per_class < 10) throw ConfigError("data.synthetic_per_class must be >= 10");
  if (evaluator == EvaluatorKind::KwsSpeech && data.cache.empty()) {
    throw ConfigError("evaluator kws-speech needs data.cache (run `nao preprocess` first)");
  }
}

namespace {

void check_keys(const ojson& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
void read(const ojson& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
  }
}

void read_network(const ojson& obj, NetworkConfig& n, const std::string& where) {
  check_keys(obj, where, {"L", "C", "epochs", "batch_size", "lr", "momentum", "weight_decay"});
  read(obj, "L", n.num_cells, where);
  read(obj, "C", n.channels, where);
  read(obj, "epochs", n.epochs, where);
  read(obj, "batch_size", n.batch_size, where);
  read(obj, "lr", n.sgd.lr, where);
  read(obj, "momentum", n.sgd.momentum, where);
  read(obj, "weight_decay", n.sgd.weight_decay, where);
}

ojson network_json(const NetworkConfig& n) {
  ojson j;
  j["L"] = n.num_cells;
  j["C"] = n.channels;
  j["epochs"] = n.epochs;
  j["batch_size"] = n.batch_size;
  j["lr"] = n.sgd.lr;
  j["momentum"] = n.sgd.momentum;
  j["weight_decay"] = n.sgd.weight_decay;
  return j;
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text) {
  ojson doc;
  try {
    doc = ojson::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  check_keys(doc, "", {"seed", "evaluator", "search", "search_network", "network", "data"});
  std::uint64_t seed = 0;
  read(doc, "seed", seed, "");
  if (doc.contains("evaluator")) {
    if (!doc["evaluator"].is_string()) throw ConfigError("config key 'evaluator' must be a string");
    cfg.evaluator = parse_evaluator(doc["evaluator"].get<std::string>());
  }
  if (doc.contains("search")) {
    const ojson& s = doc["search"];
    check_keys(s, "search",
               {"iterations", "initial_pool_size", "B", "surrogate_epochs", "surrogate_lr", "lambda", "ascent_etas",
                "ascent_steps", "ascend_fraction", "workers"});
    read(s, "iterations", cfg.search.iterations, "search");
    read(s, "initial_pool_size", cfg.search.initial_pool_size, "search");
    read(s, "B", cfg.search.num_intermediate, "search");
    read(s, "surrogate_epochs", cfg.search.surrogate.epochs, "search");
    read(s, "surrogate_lr", cfg.search.surrogate.adam.lr, "search");
    read(s, "lambda", cfg.search.surrogate.lambda, "search");
    read(s, "ascent_etas", cfg.search.ascent_etas, "search");
    read(s, "ascent_steps", cfg.search.ascent_steps, "search");
    read(s, "ascend_fraction", cfg.search.ascend_fraction, "search");
    read(s, "workers", cfg.search.worker_limit, "search");
  }
  if (doc.contains("search_network")) read_network(doc["search_network"], cfg.search_network, "search_network");
  if (doc.contains("network")) read_network(doc["network"], cfg.network, "network");
  if (doc.contains("data")) {
    const ojson& d = doc["data"];
    check_keys(d, "data", {"cache", "synthetic_per_class", "synthetic_seed"});
    read(d, "cache", cfg.data.cache, "data");
    read(d, "synthetic_per_class", cfg.data.synthetic_per_class, "data");
    read(d, "synthetic_seed", cfg.data.synthetic_seed, "data");
  }
  cfg.apply_seed(seed);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json_text(const RunConfig& cfg) {
  ojson j;
  j["seed"] = cfg.seed;
  j["evaluator"] = evaluator_name(cfg.evaluator);
  ojson s;
  s["iterations"] = cfg.search.iterations;
  s["initial_pool_size"] = cfg.search.initial_pool_size;
  s["B"] = cfg.search.num_intermediate;
  s["surrogate_epochs"] = cfg.search.surrogate.epochs;
  s["surrogate_lr"] = cfg.search.surrogate.adam.lr;
  s["lambda"] = cfg.search.surrogate.lambda;
  s["ascent_etas"] = cfg.search.ascent_etas;
  s["ascent_steps"] = cfg.search.ascent_steps;
  s["ascend_fraction"] = cfg.search.ascend_fraction;
  s["workers"] = cfg.search.worker_limit;
  j["search"] = s;
  j["search_network"] = network_json(cfg.search_network);
  j["network"] = network_json(cfg.network);
  ojson d;
  d["cache"] = cfg.data.cache;
  d["synthetic_per_class"] = cfg.data.synthetic_per_class;
  d["synthetic_seed"] = cfg.data.synthetic_seed;
  j["data"] = d;
  return j.dump();
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = to_json_text(cfg);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text.data(), text.size())));
  return buf;
}

std::vector<std::string> provenance_header(const RunConfig& cfg) {
  return {"nao " + std::string(tool_version()) + " config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed),
          "config " + to_json_text(cfg)};
}

std::string provenance_json(const RunConfig& cfg) {
  ojson j;
  j["tool_version"] = tool_version();
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  return j.dump();
}

std::shared_ptr<const FeatureDataset> load_dataset(const RunConfig& cfg, bool synthetic) {
  if (synthetic) {
    return std::make_shared<const FeatureDataset>(
        synthetic_two_tone_dataset(cfg.data.synthetic_per_class, cfg.data.synthetic_seed));
  }
  if (cfg.data.cache.empty()) throw ConfigError("data.cache is not set");
  for (const auto& p : cache_split_paths(cfg.data.cache)) {
    if (!std::filesystem::exists(p)) throw IoError("feature cache not found: " + p);
  }
  return std::make_shared<const FeatureDataset>(load_cache(cfg.data.cache));
}

std::unique_ptr<ArchEvaluator> make_evaluator(const RunConfig& cfg) {
  if (cfg.evaluator == EvaluatorKind::Oracle) return std::make_unique<OracleEvaluator>();
  auto data = load_dataset(cfg, cfg.evaluator == EvaluatorKind::KwsSynthetic);
  NetworkConfig net = cfg.search_network;
  net.num_classes = data->num_classes();
  return std::make_unique<KwsEvaluator>(std::move(data), net, std::string(evaluator_name(cfg.evaluator)));
}

}  // namespace nao
