#include "nao/gradient_check.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>

#include "nao/graph.hpp"

namespace nao {

namespace {

using Forward = std::function<Var(GraphD&, const std::vector<Var>&)>;

struct Instance {
  std::vector<TensorD> leaves;
  Forward forward;
  bool scalar_output = false;
};

TensorD gaussian(std::vector<int> shape, std::mt19937_64& rng, double sd = 1.0) {
  TensorD t(std::move(shape));
  std::normal_distribution<double> d(0.0, sd);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

/// Magnitudes in [0.1, 1] with random sign: keeps relu kinks out of the
/// finite-difference stencil.
TensorD away_from_zero(std::vector<int> shape, std::mt19937_64& rng) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

/// Distinct values 0.02 apart in random order, so max-pool winners are stable.
TensorD distinct(std::vector<int> shape, std::mt19937_64& rng) {
  TensorD t(std::move(shape));
  std::vector<int> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.02 * order[i] - 0.01 * static_cast<double>(t.size());
  return t;
}

Instance make_instance(LayerKind kind, std::mt19937_64& rng, std::uint64_t seed) {
  Instance inst;
  const int stride = 1 + static_cast<int>(seed % 2);
  switch (kind) {
    case LayerKind::EmbeddingLookup:
      inst.leaves = {gaussian({6, 4}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) {
        const std::vector<int> ids = {0, 3, 3, 5, 1};
        return g.embedding(v[0], ids);
      };
      break;
    case LayerKind::LstmCell:
      inst.leaves = {gaussian({2, 3}, rng), gaussian({2, 8}, rng, 0.5), gaussian({2, 8}, rng, 0.5),
                     gaussian({11, 32}, rng, 0.3), gaussian({32}, rng, 0.3)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) {
        auto [h, c] = g.lstm_cell(v[0], v[1], v[2], v[3], v[4]);
        const std::vector<Var> both = {h, c};
        return g.concat_channels(both);
      };
      break;
    case LayerKind::AdditiveAttention:
      inst.leaves = {gaussian({2, 3}, rng), gaussian({2, 4, 5}, rng), gaussian({2, 4, 3}, rng),
                     gaussian({3, 5}, rng, 0.5), gaussian({5}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) {
        return g.additive_attention(v[0], v[1], v[2], v[3], v[4]);
      };
      break;
    case LayerKind::Affine:
      inst.leaves = {gaussian({3, 4}, rng), gaussian({4, 3}, rng), gaussian({3}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.affine(v[0], v[1], v[2]); };
      break;
    case LayerKind::Relu:
      inst.leaves = {away_from_zero({2, 3, 4}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.relu(v[0]); };
      break;
    case LayerKind::MeanPoolOverSequence:
      inst.leaves = {gaussian({2, 4, 3}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.mean_over_sequence(v[0]); };
      break;
    case LayerKind::Conv2d:
      inst.leaves = {gaussian({2, 3, 5, 5}, rng), gaussian({4, 3, 3, 3}, rng, 0.3)};
      inst.forward = [stride](GraphD& g, const std::vector<Var>& v) {
        return g.conv2d(v[0], v[1], stride, 1);
      };
      break;
    case LayerKind::ConvReluInput:
      inst.leaves = {away_from_zero({2, 2, 4, 4}, rng), gaussian({3, 2, 1, 1}, rng)};
      inst.forward = [stride](GraphD& g, const std::vector<Var>& v) {
        return g.conv2d(v[0], v[1], stride, 0, true);
      };
      break;
    case LayerKind::DepthwiseConv2d:
      inst.leaves = {away_from_zero({2, 3, 6, 6}, rng), gaussian({3, 1, 3, 3}, rng)};
      inst.forward = [stride](GraphD& g, const std::vector<Var>& v) {
        return g.depthwise_conv2d(v[0], v[1], stride, 1, true);
      };
      break;
    case LayerKind::BatchNorm:
    case LayerKind::BatchNormInference: {
      const bool training = kind == LayerKind::BatchNorm;
      auto store = std::make_shared<ParamStore<double>>();
      TensorD var({3});
      std::uniform_real_distribution<double> u(0.5, 1.5);
      for (auto& x : var.values()) x = u(rng);
      const ParamId mean_id = store->add("mean", gaussian({3}, rng), false);
      const ParamId var_id = store->add("var", var, false);
      inst.leaves = {gaussian({4, 3, 2, 2}, rng), gaussian({3}, rng), gaussian({3}, rng)};
      inst.forward = [store, mean_id, var_id, training](GraphD& g, const std::vector<Var>& v) {
        BatchNormState<double> st{&(*store)[mean_id], &(*store)[var_id]};
        return g.batch_norm(v[0], v[1], v[2], st, training);
      };
      break;
    }
    case LayerKind::AvgPool3x3:
      inst.leaves = {gaussian({2, 2, 5, 5}, rng)};
      inst.forward = [stride](GraphD& g, const std::vector<Var>& v) {
        return g.avg_pool3x3(v[0], stride);
      };
      break;
    case LayerKind::MaxPool3x3:
      inst.leaves = {distinct({2, 2, 5, 5}, rng)};
      inst.forward = [stride](GraphD& g, const std::vector<Var>& v) {
        return g.max_pool3x3(v[0], stride);
      };
      break;
    case LayerKind::ConcatChannels:
      inst.leaves = {gaussian({2, 2, 3, 3}, rng), gaussian({2, 3, 3, 3}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.concat_channels(v); };
      break;
    case LayerKind::GlobalAvgPool:
      inst.leaves = {gaussian({2, 3, 3, 4}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.global_avg_pool(v[0]); };
      break;
    case LayerKind::SoftmaxCrossEntropy: {
      inst.leaves = {gaussian({3, 5}, rng)};
      std::vector<int> targets(3);
      std::vector<std::uint8_t> mask(15, 1);
      std::uniform_int_distribution<int> pick(0, 4);
      for (int r = 0; r < 3; ++r) {
        targets[static_cast<std::size_t>(r)] = pick(rng);
        const int off = pick(rng);
        if (off != targets[static_cast<std::size_t>(r)]) mask[static_cast<std::size_t>(r * 5 + off)] = 0;
      }
      inst.scalar_output = true;
      inst.forward = [targets, mask](GraphD& g, const std::vector<Var>& v) {
        return g.softmax_cross_entropy(v[0], targets, mask);
      };
      break;
    }
    case LayerKind::L2Normalize:
      inst.leaves = {away_from_zero({3, 4}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.l2_normalize(v[0]); };
      break;
    case LayerKind::Tanh:
      inst.leaves = {gaussian({3, 4}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.tanh(v[0]); };
      break;
    case LayerKind::Sigmoid:
      inst.leaves = {gaussian({3, 4}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.sigmoid(v[0]); };
      break;
    case LayerKind::ShiftCrop:
      inst.leaves = {gaussian({1, 2, 4, 5}, rng)};
      inst.forward = [](GraphD& g, const std::vector<Var>& v) { return g.shift_crop(v[0]); };
      break;
    case LayerKind::SquaredError: {
      inst.leaves = {gaussian({5}, rng)};
      std::vector<double> t(5);
      for (auto& x : t) x = std::normal_distribution<double>()(rng);
      inst.scalar_output = true;
      inst.forward = [t](GraphD& g, const std::vector<Var>& v) { return g.squared_error(v[0], t); };
      break;
    }
  }
  return inst;
}

double evaluate(const Instance& inst, const std::vector<TensorD>& leaves,
                const std::vector<double>& targets) {
  GraphD g;
  std::vector<Var> vars;
  for (const auto& t : leaves) vars.push_back(g.input(t, false));
  const Var y = inst.forward(g, vars);
  if (inst.scalar_output) return g.value(y).item();
  return g.value(g.squared_error(y, targets)).item();
}

}  // namespace

std::vector<LayerKind> all_layer_kinds() {
  std::vector<LayerKind> out;
  for (int k = 0; k <= static_cast<int>(LayerKind::ConvReluInput); ++k) out.push_back(static_cast<LayerKind>(k));
  return out;
}

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::EmbeddingLookup: return "embedding-lookup";
    case LayerKind::LstmCell: return "lstm-cell";
    case LayerKind::AdditiveAttention: return "additive-attention";
    case LayerKind::Affine: return "affine";
    case LayerKind::Relu: return "relu";
    case LayerKind::MeanPoolOverSequence: return "mean-pool-over-sequence";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "depthwise-conv2d";
    case LayerKind::BatchNorm: return "batch-norm";
    case LayerKind::AvgPool3x3: return "avg-pool-3x3";
    case LayerKind::MaxPool3x3: return "max-pool-3x3";
    case LayerKind::ConcatChannels: return "concat-channels";
    case LayerKind::GlobalAvgPool: return "global-avg-pool";
    case LayerKind::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    case LayerKind::L2Normalize: return "l2-normalize";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::BatchNormInference: return "batch-norm-inference";
    case LayerKind::ShiftCrop: return "shift-crop";
    case LayerKind::SquaredError: return "squared-error";
    case LayerKind::ConvReluInput: return "conv2d-relu-input";
  }
  return "?";
}

double gradient_tolerance(LayerKind kind) { return kind == LayerKind::BatchNorm ? 1e-3 : 1e-4; }

GradientCheckResult gradient_check(LayerKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Instance inst = make_instance(kind, rng, seed);

  std::vector<double> targets;
  {
    GraphD g;
    std::vector<Var> vars;
    for (const auto& t : inst.leaves) vars.push_back(g.input(t, false));
    const Var y = inst.forward(g, vars);
    std::normal_distribution<double> d;
    targets.resize(g.value(y).size());
    for (auto& x : targets) x = d(rng);
  }

  // Analytic pass.
  std::vector<TensorD> analytic;
  {
    GraphD g;
    std::vector<Var> vars;
    for (const auto& t : inst.leaves) vars.push_back(g.input(t, true));
    const Var y = inst.forward(g, vars);
    const Var loss = inst.scalar_output ? y : g.squared_error(y, targets);
    g.backward(loss);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      TensorD gr = g.grad(vars[i]);
      if (gr.empty()) gr = TensorD(inst.leaves[i].shape());
      analytic.push_back(std::move(gr));
    }
  }

  constexpr double step = 1e-3;
  GradientCheckResult result;
  std::vector<TensorD> probe = inst.leaves;
  for (std::size_t li = 0; li < probe.size(); ++li) {
    for (std::size_t e = 0; e < probe[li].size(); ++e) {
      const double orig = probe[li][e];
      probe[li][e] = orig + step;
      const double up = evaluate(inst, probe, targets);
      probe[li][e] = orig - step;
      const double down = evaluate(inst, probe, targets);
      probe[li][e] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[li][e];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-2});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace nao
