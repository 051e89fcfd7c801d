#include "nao/search_engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "nao/errors.hpp"
#include "nao/seed.hpp"

namespace nao {

void SearchConfig::validate() const {
  if (iterations < 1) throw ConfigError("search.iterations must be >= 1");
  if (initial_pool_size < 2) throw ConfigError("search.initial_pool_size must be >= 2");
  if (num_intermediate < 1 || num_intermediate > kMaxNodes) {
    throw ConfigError("search.B must be in [1, " + std::to_string(kMaxNodes) + "]");
  }
  if (surrogate.epochs < 0) throw ConfigError("search.surrogate_epochs must be >= 0");
  if (surrogate.lambda < 0.0 || surrogate.lambda > 1.0) throw ConfigError("search.lambda must be in [0, 1]");
  if (!(surrogate.adam.lr > 0.0)) throw ConfigError("search.surrogate_lr must be > 0");
  if (ascent_steps < 0) throw ConfigError("search.ascent_steps must be >= 0");
  if (ascent_etas.empty()) throw ConfigError("search.ascent_etas must not be empty");
  for (double eta : ascent_etas)
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("search.ascent_etas entries must be finite and >= 0");
  if (!(ascend_fraction > 0.0 && ascend_fraction <= 1.0)) {
    throw ConfigError("search.ascend_fraction must be in (0, 1]");
  }
  if (worker_limit < 1) throw ConfigError("workers must be >= 1");
}

std::string_view provenance_name(Provenance p) { return p == Provenance::Random ? "random" : "ascent"; }

std::string dedup_key(const TokenSequence& seq) {
  std::string key(seq.size(), '?');
  for (std::size_t i = 0; i < seq.size(); ++i) key[i] = static_cast<char>('a' + static_cast<int>(seq.tokens[i]));
  return key;
}

TokenSequence sequence_from_key(std::string_view key) {
  TokenSequence seq;
  seq.tokens.reserve(key.size());
  for (char ch : key) {
    const int v = ch - 'a';
    if (v < 0 || v >= kOutputVocab) throw FormatError("bad architecture key character '" + std::string(1, ch) + "'");
    seq.tokens.push_back(static_cast<Token>(v));
  }
  return seq;
}

// ---------------------------------------------------------------------------

const PoolEntry& CandidatePool::add(PoolEntry entry) {
  if (contains(entry.key)) throw std::invalid_argument("duplicate pool entry " + entry.key);
  if (!std::isfinite(entry.score)) throw std::invalid_argument("non-finite score for " + entry.key);
  entry.order = static_cast<int>(entries_.size());
  index_.emplace(entry.key, entries_.size());
  entries_.push_back(std::move(entry));
  return entries_.back();
}

std::vector<std::size_t> CandidatePool::ranking() const {
  std::vector<std::size_t> idx(entries_.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return entries_[a].score > entries_[b].score; });
  return idx;
}

const PoolEntry& CandidatePool::best() const {
  if (entries_.empty()) throw std::logic_error("best() on an empty pool");
  return entries_[ranking().front()];
}

// ---------------------------------------------------------------------------

namespace {

struct Pending {
  TokenSequence seq;
  std::string key;
  Provenance source;
};

struct Scored {
  double score = 0.0;
  double wall_ms = 0.0;
};

std::vector<Scored> evaluate_all(const std::vector<Pending>& todo, const ArchEvaluator& evaluator,
                                 int workers) {
  std::vector<Scored> out(todo.size());
  std::vector<std::exception_ptr> errors(todo.size());
  auto run_one = [&](std::size_t i) {
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const double s = evaluator.evaluate(decode_tokens(todo[i].seq));
      out[i].wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
        throw std::runtime_error("evaluator " + evaluator.descriptor() + " returned score " + std::to_string(s));
      }
      out[i].score = s;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(workers), todo.size());
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < todo.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < todo.size(); i = next++) run_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < todo.size(); ++i) {
    if (!errors[i]) continue;
    const std::string arch_json = to_json_text(decode_tokens(todo[i].seq));
    try {
      std::rethrow_exception(errors[i]);
    } catch (const EvaluatorError&) {
      throw;
    } catch (const std::exception& e) {
      throw EvaluatorError(std::string("evaluation failed: ") + e.what(), arch_json);
    }
  }
  return out;
}

std::vector<Pending> initial_candidates(const SearchConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0));
  std::vector<Pending> out;
  std::unordered_map<std::string, bool> seen;
  const long max_draws = 1000L * cfg.initial_pool_size;
  for (long draw = 0; draw < max_draws && static_cast<int>(out.size()) < cfg.initial_pool_size; ++draw) {
    TokenSequence seq = encode_tokens(random_architecture(rng, cfg.num_intermediate));
    std::string key = dedup_key(seq);
    if (!seen.emplace(key, true).second) continue;
    out.push_back({std::move(seq), std::move(key), Provenance::Random});
  }
  return out;
}

}  // namespace

SearchResult run_search(const SearchConfig& cfg, const ArchEvaluator& evaluator, const SearchHooks& hooks) {
  cfg.validate();
  struct {
    CandidatePool pool;
    std::vector<EvaluationRecord> log;
    std::vector<IterationSummary> iterations;
    std::vector<std::string> warnings;
  } result;
  std::vector<Pending> pending = initial_candidates(cfg);

  for (int it = 1; it <= cfg.iterations; ++it) {
    IterationSummary summary;
    summary.iteration = it;
    const std::vector<Scored> scored = evaluate_all(pending, evaluator, cfg.worker_limit);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      PoolEntry e{pending[i].key, pending[i].seq, scored[i].score, it, pending[i].source, 0};
      const PoolEntry& added = result.pool.add(std::move(e));
      EvaluationRecord rec{it, added.key, added.source, added.score, cfg.log_wall_time ? scored[i].wall_ms : 0.0};
      result.log.push_back(rec);
      if (hooks.on_evaluation) hooks.on_evaluation(rec);
    }
    summary.evaluated = static_cast<int>(pending.size());
    summary.best_score = result.pool.best().score;
    pending.clear();

    if (it < cfg.iterations) {
      std::vector<double> raw;
      std::vector<TrainPair> pairs;
      raw.reserve(result.pool.size());
      for (const auto& e : result.pool.entries()) raw.push_back(e.score);
      const std::vector<float> norm = normalize_scores(raw);
      for (std::size_t i = 0; i < raw.size(); ++i) pairs.push_back({result.pool.entries()[i].seq, norm[i]});

      SurrogateModel model(cfg.num_intermediate, derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(it)),
                           cfg.surrogate_dims);
      const auto curve = train_surrogate(model, pairs, cfg.surrogate);
      summary.surrogate_final_loss = curve.empty() ? 0.0 : loss_joint(model, pairs, cfg.surrogate.lambda).total;
      summary.reconstruction = reconstruction_accuracy(model, pairs);

      const std::vector<std::size_t> order = result.pool.ranking();
      const auto take = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(cfg.ascend_fraction * static_cast<double>(order.size()))));
      std::vector<TokenSequence> seeds;
      for (std::size_t i = 0; i < take; ++i) seeds.push_back(result.pool.entries()[order[i]].seq);
      const std::vector<LatentCode> codes = encode_batch(model, seeds);
      std::vector<LatentCode> moved;
      moved.reserve(codes.size() * cfg.ascent_etas.size());
      for (double eta : cfg.ascent_etas)
        for (const auto& c : codes) moved.push_back(latent_ascend(model, c, eta, cfg.ascent_steps));
      std::unordered_map<std::string, bool> proposed;
      for (const Decoded& d : decode_greedy_batch(model, moved)) {
        std::string key = dedup_key(d.seq);
        if (result.pool.contains(key) || !proposed.emplace(key, true).second) continue;
        pending.push_back({d.seq, std::move(key), Provenance::Ascent});
      }
      summary.proposals = static_cast<int>(pending.size());
    }
    result.iterations.push_back(summary);
    if (hooks.on_iteration) hooks.on_iteration(summary);
    if (it < cfg.iterations && pending.empty()) {
      result.warnings.push_back("iteration " + std::to_string(it) +
                                ": no new candidates after ascent and deduplication; stopping early");
      break;
    }
  }

  const PoolEntry& best = result.pool.best();
  return SearchResult{decode_tokens(best.seq), best.score, std::move(result.pool), std::move(result.log),
                      std::move(result.iterations), std::move(result.warnings)};
}

// ---------------------------------------------------------------------------

namespace {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_search_log(const std::string& path, const SearchResult& result,
                      const std::vector<std::string>& header_comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& line : header_comment) out << "# " << line << '\n';
  out << "iteration,arch_id,source,score,wall_ms\n";
  for (const auto& r : result.log) {
    out << r.iteration << ',' << r.arch_id << ',' << provenance_name(r.source) << ',' << format_number(r.score)
        << ',' << format_number(r.wall_ms) << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

void write_pool_jsonl(const std::string& path, const SearchResult& result, const std::string& run_json) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : result.pool.entries()) {
    nlohmann::ordered_json j;
    j["arch_id"] = e.key;
    j["score"] = e.score;
    j["iteration"] = e.iteration;
    j["source"] = provenance_name(e.source);
    j["order"] = e.order;
    j["tokens"] = to_string(e.seq);
    j["architecture"] = nlohmann::ordered_json::parse(to_json_text(decode_tokens(e.seq)));
    if (!run_json.empty()) j["run"] = nlohmann::ordered_json::parse(run_json);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace nao
