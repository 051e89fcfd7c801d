#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nao/arch_space.hpp"
#include "nao/checkpoint.hpp"
#include "nao/params.hpp"

namespace nao {

struct SurrogateDims {
  int embedding = 32;
  int hidden = 96;
  int attention = 96;
  int predictor_hidden = 96;
};

/// Per-step unit-norm encoder states, row-major [steps, dim].
struct LatentCode {
  int steps = 0;
  int dim = 0;
  std::vector<float> hidden;

  const float* step(int t) const { return hidden.data() + static_cast<std::size_t>(t) * dim; }
  friend bool operator==(const LatentCode&, const LatentCode&) = default;
};

struct TrainPair {
  TokenSequence seq;
  float score = 0.0F;
};

/// Encoder E, predictor f and attention decoder D sharing one parameter store.
class SurrogateModel {
 public:
  SurrogateModel(int num_intermediate, std::uint64_t seed, SurrogateDims dims = {});

  int num_intermediate() const noexcept { return num_intermediate_; }
  std::size_t sequence_length() const noexcept { return nao::sequence_length(num_intermediate_); }
  const SurrogateDims& dims() const noexcept { return dims_; }

  ParamStoreF& params() noexcept { return params_; }
  const ParamStoreF& params() const noexcept { return params_; }

  struct Ids {
    ParamId enc_embedding, enc_w, enc_b;
    ParamId pred_w1, pred_b1, pred_w2, pred_b2;
    ParamId dec_embedding, dec_w, dec_b;
    ParamId att_keys, att_query, att_v;
    ParamId out_w, out_b;
  };
  const Ids& ids() const noexcept { return ids_; }

 private:
  int num_intermediate_;
  SurrogateDims dims_;
  ParamStoreF params_;
  Ids ids_;
};

LatentCode encode(const SurrogateModel& model, const TokenSequence& seq);
/// Batched encode; every sequence must have the model's length.
std::vector<LatentCode> encode_batch(const SurrogateModel& model,
                                     const std::vector<TokenSequence>& seqs);

/// Predicted normalized score in (0, 1).
float predict(const SurrogateModel& model, const LatentCode& code);

struct Decoded {
  TokenSequence seq;
  double log_prob = 0.0;
};

/// Grammar-masked argmax decoding; the result always satisfies decode_tokens.
Decoded decode_greedy(const SurrogateModel& model, const LatentCode& code);
std::vector<Decoded> decode_greedy_batch(const SurrogateModel& model,
                                         const std::vector<LatentCode>& codes);
/// log P_D(target | code) under teacher forcing. Always <= 0.
double teacher_forced_log_prob(const SurrogateModel& model, const LatentCode& code,
                               const TokenSequence& target);

struct JointLoss {
  double total = 0.0;
  double pred = 0.0;  // sum of squared errors
  double rec = 0.0;   // negative log-likelihood summed over tokens and pairs
};

JointLoss loss_joint(const SurrogateModel& model, const std::vector<TrainPair>& pairs,
                     double lambda = 0.9);

struct SurrogateTrainConfig {
  int epochs = 1000;
  double lambda = 0.9;
  AdamConfig adam{};
};

/// Full-batch Adam on the joint loss. Returns the loss before each update.
/// NonFiniteError carries the failing epoch.
std::vector<JointLoss> train_surrogate(SurrogateModel& model, const std::vector<TrainPair>& pairs,
                                       const SurrogateTrainConfig& cfg,
                                       const std::function<void(int, const JointLoss&)>& on_epoch = {});

/// Gradient of predict() with respect to every latent step.
LatentCode predictor_gradient(const SurrogateModel& model, const LatentCode& code);

/// h <- normalize(h + eta * df/dh) per step, stopping on the first step whose
/// greedy decode differs from the decode of `code`. The input is returned if
/// the predicted score did not improve.
LatentCode latent_ascend(const SurrogateModel& model, const LatentCode& code, double eta,
                         int max_steps);

/// Min-max scaling onto [0, 1]; an all-equal pool maps to 0.5.
std::vector<float> normalize_scores(const std::vector<double>& raw);

/// Fraction of pairs whose greedy reconstruction is exact.
double reconstruction_accuracy(const SurrogateModel& model, const std::vector<TrainPair>& pairs);

void save_surrogate(const SurrogateModel& model, const std::string& path);
/// Loads into an already constructed model of matching size.
void load_surrogate(SurrogateModel& model, const std::string& path);

}  // namespace nao
