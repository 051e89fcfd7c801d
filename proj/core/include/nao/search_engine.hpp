#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nao/arch_space.hpp"
#include "nao/evaluators.hpp"
#include "nao/surrogate.hpp"

namespace nao {

struct SearchConfig {
  int iterations = 3;
  int initial_pool_size = 20;
  int num_intermediate = 5;
  SurrogateDims surrogate_dims{};
  SurrogateTrainConfig surrogate{};
  /// Every ascended code is moved once per step size; all distinct decodes are proposed.
  std::vector<double> ascent_etas{1.0, 3.0, 10.0, 30.0};
  int ascent_steps = 30;
  /// Fraction of the pool (best first) whose codes are ascended each iteration.
  double ascend_fraction = 0.5;
  std::uint64_t seed = 0;
  int worker_limit = 1;
  /// When false the wall_ms column is written as 0 so logs stay byte-identical.
  bool log_wall_time = false;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

enum class Provenance : std::uint8_t { Random, Ascent };
std::string_view provenance_name(Provenance p);

/// Injective, stable text key for a grammatical sequence: one letter per token.
std::string dedup_key(const TokenSequence& seq);
/// Inverse of dedup_key; throws FormatError on foreign characters.
TokenSequence sequence_from_key(std::string_view key);

struct PoolEntry {
  std::string key;
  TokenSequence seq;
  double score = 0.0;
  int iteration = 0;  // 1-based iteration in which it was evaluated
  Provenance source = Provenance::Random;
  int order = 0;      // discovery index
};

class CandidatePool {
 public:
  bool contains(const std::string& key) const { return index_.count(key) != 0; }
  /// Throws std::invalid_argument on a duplicate key or a non-finite score.
  const PoolEntry& add(PoolEntry entry);

  const std::vector<PoolEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  /// Highest score, earliest discovery on ties. Throws std::logic_error when empty.
  const PoolEntry& best() const;
  /// Entry indices sorted best first (stable on ties).
  std::vector<std::size_t> ranking() const;

 private:
  std::vector<PoolEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct EvaluationRecord {
  int iteration = 0;
  std::string arch_id;
  Provenance source = Provenance::Random;
  double score = 0.0;
  double wall_ms = 0.0;
};

struct IterationSummary {
  int iteration = 0;
  int evaluated = 0;
  double best_score = 0.0;
  double surrogate_final_loss = 0.0;
  double reconstruction = 0.0;
  int proposals = 0;  // new candidates for the next iteration
};

struct SearchResult {
  Architecture best;
  double best_score = 0.0;
  CandidatePool pool;
  std::vector<EvaluationRecord> log;
  std::vector<IterationSummary> iterations;
  std::vector<std::string> warnings;
};

struct SearchHooks {
  std::function<void(const EvaluationRecord&)> on_evaluation;
  std::function<void(const IterationSummary&)> on_iteration;
};

/// Random initial pool, then per iteration: evaluate pending candidates,
/// train a fresh surrogate on the normalized pool, ascend the codes of the top
/// entries and decode them into the next candidate set. Proposals from the
/// last iteration would never be evaluated, so that phase is skipped there.
/// EvaluatorError carries the offending architecture as JSON.
SearchResult run_search(const SearchConfig& cfg, const ArchEvaluator& evaluator,
                        const SearchHooks& hooks = {});

/// CSV: iteration,arch_id,source,score,wall_ms, preceded by `header_comment` lines.
void write_search_log(const std::string& path, const SearchResult& result,
                      const std::vector<std::string>& header_comment);
/// One JSON object per pool entry.
void write_pool_jsonl(const std::string& path, const SearchResult& result, const std::string& run_json = "");

}  // namespace nao
