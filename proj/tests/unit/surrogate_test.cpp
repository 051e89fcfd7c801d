#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "nao/errors.hpp"
#include "nao/evaluators.hpp"
#include "nao/surrogate.hpp"

namespace nao {
namespace {

std::vector<TrainPair> oracle_pool(int num_intermediate, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> raw;
  std::vector<TokenSequence> seqs;
  while (static_cast<int>(seqs.size()) < n) {
    const Architecture a = random_architecture(rng, num_intermediate);
    const TokenSequence s = encode_tokens(a);
    if (std::find(seqs.begin(), seqs.end(), s) != seqs.end()) continue;
    seqs.push_back(s);
    raw.push_back(synthetic_oracle(a));
  }
  const auto norm = normalize_scores(raw);
  std::vector<TrainPair> pairs;
  for (int i = 0; i < n; ++i) pairs.push_back({seqs[static_cast<std::size_t>(i)], norm[static_cast<std::size_t>(i)]});
  return pairs;
}

LatentCode random_code(int steps, int dim, std::mt19937_64& rng) {
  std::normal_distribution<float> nd;
  LatentCode c{steps, dim, std::vector<float>(static_cast<std::size_t>(steps) * dim)};
  for (int t = 0; t < steps; ++t) {
    double s = 0;
    for (int j = 0; j < dim; ++j) {
      const float v = nd(rng);
      c.hidden[static_cast<std::size_t>(t) * dim + j] = v;
      s += v * v;
    }
    for (int j = 0; j < dim; ++j) c.hidden[static_cast<std::size_t>(t) * dim + j] /= static_cast<float>(std::sqrt(s));
  }
  return c;
}

// Sum over positions of ln(number of grammatical tokens), counted from the
// position rules directly.
double uniform_nll(const TokenSequence& seq) {
  double total = 0;
  for (std::size_t r = 0; r < seq.size(); r += 3) {
    const int owner = 2 + static_cast<int>((r / 6) % (seq.size() / 12));
    const bool sep = seq.tokens[r + 1] == Token::SepConv;
    total += std::log(owner) + std::log(4.0) + (sep ? std::log(2.0) : 0.0);
  }
  return total;
}

TEST(Surrogate, EncodeShapeAndUnitNorm) {
  SurrogateModel m(5, 1);
  Rng rng(2);
  const LatentCode c = encode(m, encode_tokens(random_architecture(rng, 5)));
  ASSERT_EQ(c.steps, 60);
  ASSERT_EQ(c.dim, 96);
  for (int t = 0; t < c.steps; ++t) {
    double s = 0;
    for (int j = 0; j < c.dim; ++j) s += c.step(t)[j] * c.step(t)[j];
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-5);
  }
}

TEST(Surrogate, EncodeDeterministicAndBatchConsistent) {
  SurrogateModel m(2, 3);
  Rng rng(4);
  const TokenSequence a = encode_tokens(random_architecture(rng, 2));
  const TokenSequence b = encode_tokens(random_architecture(rng, 2));
  EXPECT_EQ(encode(m, a), encode(m, a));
  const auto batch = encode_batch(m, {a, b});
  const LatentCode sa = encode(m, a), sb = encode(m, b);
  for (std::size_t i = 0; i < sa.hidden.size(); ++i) {
    ASSERT_NEAR(batch[0].hidden[i], sa.hidden[i], 1e-5);
    ASSERT_NEAR(batch[1].hidden[i], sb.hidden[i], 1e-5);
  }
}

TEST(Surrogate, EncodeIsCausal) {
  SurrogateModel m(2, 5);
  Rng rng(6);
  const TokenSequence a = encode_tokens(random_architecture(rng, 2));
  TokenSequence b = a;
  const std::size_t k = 7;  // an op-type slot
  b.tokens[k] = a.tokens[k] == Token::AvgPool ? Token::MaxPool : Token::AvgPool;
  b.tokens[k + 1] = Token::Size3;
  const LatentCode ca = encode(m, a), cb = encode(m, b);
  for (int t = 0; t < ca.steps; ++t) {
    const bool same = std::equal(ca.step(t), ca.step(t) + ca.dim, cb.step(t));
    if (t < static_cast<int>(k)) {
      EXPECT_TRUE(same) << "step " << t;
    } else {
      EXPECT_FALSE(same) << "step " << t;
    }
  }
}

TEST(Surrogate, EncodeRejectsWrongLength) {
  SurrogateModel m(2, 1);
  TokenSequence s;
  s.tokens.assign(12, Token::Node0);
  EXPECT_THROW(encode(m, s), GrammarError);
}

TEST(Surrogate, PredictRangeAndPermutationInvariance) {
  SurrogateModel m(3, 7);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) {
    const LatentCode c = random_code(36, 96, rng);
    const float p = predict(m, c);
    EXPECT_GT(p, 0.0F);
    EXPECT_LT(p, 1.0F);
    LatentCode rev = c;
    for (int t = 0; t < c.steps; ++t) {
      std::copy(c.step(t), c.step(t) + c.dim, rev.hidden.begin() + static_cast<std::ptrdiff_t>(c.steps - 1 - t) * c.dim);
    }
    EXPECT_NEAR(predict(m, rev), p, 1e-6);
  }
}

TEST(Surrogate, GreedyDecodeAlwaysGrammatical) {
  for (int b : {1, 3, 5}) {
    SurrogateModel m(b, 10 + b);
    std::mt19937_64 rng(b);
    std::vector<LatentCode> codes;
    for (int i = 0; i < 300; ++i) codes.push_back(random_code(12 * b, 96, rng));
    for (const Decoded& d : decode_greedy_batch(m, codes)) {
      EXPECT_NO_THROW(decode_tokens(d.seq));
      EXPECT_LE(d.log_prob, 0.0);
    }
  }
}

TEST(Surrogate, TeacherForcedLogProb) {
  SurrogateModel m(2, 9);
  Rng rng(10);
  const TokenSequence target = encode_tokens(random_architecture(rng, 2));
  std::mt19937_64 r2(1);
  const LatentCode code = random_code(24, 96, r2);
  EXPECT_LE(teacher_forced_log_prob(m, code, target), 0.0);
  const Decoded greedy = decode_greedy(m, code);
  EXPECT_NEAR(teacher_forced_log_prob(m, code, greedy.seq), greedy.log_prob, 1e-3);
  EXPECT_GE(greedy.log_prob, teacher_forced_log_prob(m, code, target) - 1e-4);
}

TEST(Surrogate, JointLossLambdaBoundaries) {
  SurrogateModel m(2, 11);
  const auto pairs = oracle_pool(2, 6, 12);
  const JointLoss mid = loss_joint(m, pairs, 0.9);
  const JointLoss only_pred = loss_joint(m, pairs, 1.0);
  const JointLoss only_rec = loss_joint(m, pairs, 0.0);
  EXPECT_EQ(only_pred.total, only_pred.pred);
  EXPECT_EQ(only_rec.total, only_rec.rec);
  EXPECT_NEAR(mid.total, 0.9 * mid.pred + 0.1 * mid.rec, 1e-3 * mid.total);
}

TEST(Surrogate, UntrainedReconstructionNearUniform) {
  SurrogateModel m(5, 13);
  const auto pairs = oracle_pool(5, 20, 14);
  double baseline = 0;
  for (const auto& p : pairs) baseline += uniform_nll(p.seq);
  const JointLoss l = loss_joint(m, pairs);
  EXPECT_NEAR(l.rec, baseline, 0.1 * baseline);
}

TEST(Surrogate, TrainingIsDeterministicAndReducesLoss) {
  const auto pairs = oracle_pool(1, 10, 15);
  SurrogateTrainConfig cfg;
  cfg.epochs = 60;
  SurrogateModel a(1, 16), b(1, 16);
  const auto ca = train_surrogate(a, pairs, cfg);
  const auto cb = train_surrogate(b, pairs, cfg);
  ASSERT_EQ(ca.size(), 60u);
  for (std::size_t i = 0; i < ca.size(); ++i) {
    EXPECT_EQ(ca[i].total, cb[i].total);
  }
  EXPECT_LT(loss_joint(a, pairs).total, ca.front().total);
}

TEST(Surrogate, RequiresTwoPairs) {
  SurrogateModel m(1, 1);
  EXPECT_THROW(train_surrogate(m, oracle_pool(1, 1, 2), {}), std::invalid_argument);
}

TEST(Surrogate, EveryParameterReceivesGradient) {
  const auto pairs = oracle_pool(2, 8, 17);
  SurrogateModel m(2, 18);
  SurrogateTrainConfig cfg;
  cfg.epochs = 1;
  train_surrogate(m, pairs, cfg);
  for (const auto& p : m.params().all()) {
    ASSERT_EQ(p.grad.size(), p.value.size()) << p.name;
    const bool any = std::any_of(p.grad.values().begin(), p.grad.values().end(), [](float g) { return g != 0.0F; });
    EXPECT_TRUE(any) << p.name;
  }
}

TEST(Surrogate, PredictorFitsSmallPool) {
  const auto pairs = oracle_pool(1, 20, 19);
  SurrogateModel m(1, 20);
  const auto curve = train_surrogate(m, pairs, {});
  const JointLoss fin = loss_joint(m, pairs);
  EXPECT_LE(fin.pred, 0.1 * curve.front().pred);
  EXPECT_LE(fin.total, 0.1 * curve.front().total);
  EXPECT_EQ(reconstruction_accuracy(m, pairs), 1.0);
}

TEST(Surrogate, MemorizesTwoPairPool) {
  const auto pairs = oracle_pool(3, 2, 21);
  SurrogateModel m(3, 22);
  SurrogateTrainConfig cfg;
  cfg.epochs = 300;
  train_surrogate(m, pairs, cfg);
  EXPECT_EQ(reconstruction_accuracy(m, pairs), 1.0);
}

TEST(LatentAscend, ZeroStepIsIdentity) {
  SurrogateModel m(2, 23);
  Rng rng(24);
  const LatentCode c = encode(m, encode_tokens(random_architecture(rng, 2)));
  EXPECT_EQ(latent_ascend(m, c, 0.0, 30), c);
}

TEST(LatentAscend, NeverLowersPrediction) {
  const auto pairs = oracle_pool(1, 12, 25);
  SurrogateModel m(1, 26);
  SurrogateTrainConfig cfg;
  cfg.epochs = 200;
  train_surrogate(m, pairs, cfg);
  for (const auto& p : pairs) {
    const LatentCode c = encode(m, p.seq);
    for (double eta : {0.1, 1.0, 10.0}) {
      const LatentCode moved = latent_ascend(m, c, eta, 30);
      EXPECT_GE(predict(m, moved), predict(m, c) - 1e-6);
      for (int t = 0; t < moved.steps; ++t) {
        double s = 0;
        for (int j = 0; j < moved.dim; ++j) s += moved.step(t)[j] * moved.step(t)[j];
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-5);
      }
    }
  }
}

TEST(LatentAscend, GradientMatchesFiniteDifference) {
  SurrogateModel m(1, 27);
  std::mt19937_64 rng(28);
  const LatentCode c = random_code(12, 96, rng);
  const LatentCode g = predictor_gradient(m, c);
  for (int idx : {0, 50, 500, 1000}) {
    LatentCode plus = c, minus = c;
    plus.hidden[static_cast<std::size_t>(idx)] += 1e-2F;
    minus.hidden[static_cast<std::size_t>(idx)] -= 1e-2F;
    const double fd = (predict(m, plus) - predict(m, minus)) / 2e-2;
    EXPECT_NEAR(g.hidden[static_cast<std::size_t>(idx)], fd, 1e-4 + 0.05 * std::abs(fd));
  }
}

TEST(NormalizeScores, Examples) {
  const auto a = normalize_scores({0.2, 0.6, 1.0});
  EXPECT_FLOAT_EQ(a[0], 0.0F);
  EXPECT_FLOAT_EQ(a[1], 0.5F);
  EXPECT_FLOAT_EQ(a[2], 1.0F);
  EXPECT_EQ(normalize_scores({0.7, 0.7}), (std::vector<float>{0.5F, 0.5F}));
  EXPECT_THROW(normalize_scores({}), std::invalid_argument);
}

TEST(NormalizeScores, PreservesOrder) {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<double> raw(50);
  for (auto& v : raw) v = u(rng);
  const auto norm = normalize_scores(raw);
  auto argsort = [](const auto& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return idx;
  };
  EXPECT_EQ(argsort(raw), argsort(norm));
}

TEST(Surrogate, CheckpointRoundTrip) {
  SurrogateModel a(2, 30), b(2, 31);
  const auto path = (std::filesystem::temp_directory_path() / "nao_surrogate_rt.ckpt").string();
  save_surrogate(a, path);
  load_surrogate(b, path);
  Rng rng(32);
  const TokenSequence s = encode_tokens(random_architecture(rng, 2));
  EXPECT_EQ(encode(a, s), encode(b, s));
  const auto tensors = read_checkpoint(path);
  for (const auto& t : tensors) EXPECT_EQ(t.name.rfind("surrogate/", 0), 0u) << t.name;
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace nao
