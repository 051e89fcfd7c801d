#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "nao/child_network.hpp"
#include "nao/errors.hpp"

namespace nao {
namespace {

NetworkConfig small_config(int L, int C, int classes = 12) {
  NetworkConfig cfg;
  cfg.num_cells = L;
  cfg.channels = C;
  cfg.num_classes = classes;
  cfg.seed = 11;
  return cfg;
}

Cell pools_from_inputs() { return Cell({NodeInputs{{0, OpKind::MaxPool3x3}, {1, OpKind::AvgPool3x3}}}); }

// Nodes no edge reads from, computed without the library helper.
int unused_nodes(const Cell& c) {
  std::set<int> used;
  for (const auto& n : c.nodes()) {
    used.insert(n.first.source);
    used.insert(n.second.source);
  }
  return c.last_index() + 1 - static_cast<int>(used.size());
}

TEST(ChildNetwork, RejectsTooFewCells) {
  Rng rng(1);
  const Architecture a = random_architecture(rng, 2);
  EXPECT_THROW(build_network(a, small_config(2, 8)), ConfigError);
  EXPECT_THROW(build_network(a, small_config(3, 0)), ConfigError);
}

TEST(ChildNetwork, ReductionPlacement) {
  Rng rng(2);
  const Architecture a = random_architecture(rng, 1);
  EXPECT_EQ(build_network(a, small_config(3, 4)).reduction_indices(), (std::vector<int>{1, 2}));
  EXPECT_EQ(build_network(a, small_config(12, 4)).reduction_indices(), (std::vector<int>{4, 8}));
  EXPECT_EQ(build_network(a, small_config(7, 4)).reduction_indices(), (std::vector<int>{2, 4}));
}

TEST(ChildNetwork, ShapesAndChannelBookkeeping) {
  Rng rng(3);
  for (int trial = 0; trial < 6; ++trial) {
    const Architecture a = random_architecture(rng, 5);
    const int L = 3 + trial % 3 * 2, C = 8;
    ChildNetwork net = build_network(a, small_config(L, C));
    const auto shapes = net.feature_shapes();
    ASSERT_EQ(shapes.size(), static_cast<std::size_t>(L) + 1);
    EXPECT_EQ(shapes.back()[1], 25);
    EXPECT_EQ(shapes.back()[2], 10);
    int ck = C;
    for (int k = 0; k < L; ++k) {
      const bool red = k == L / 3 || k == 2 * L / 3;
      if (red) ck *= 2;
      const Cell& cell = red ? a.reduction() : a.normal();
      EXPECT_EQ(shapes[static_cast<std::size_t>(k) + 1][0], unused_nodes(cell) * ck) << "cell " << k;
    }
    GraphF g;
    const Var logits = net.forward(g, g.input(TensorF({2, 1, 98, 40}, 0.1F)), true);
    EXPECT_EQ(g.value(logits).shape(), (std::vector<int>{2, 12}));
  }
}

TEST(ChildNetwork, AllInputEdgesConcatenateEveryNode) {
  std::vector<NodeInputs> nodes(5, NodeInputs{{0, OpKind::SepConv3x3}, {1, OpKind::Identity}});
  const Architecture a{Cell(nodes), Cell(nodes)};
  ChildNetwork net = build_network(a, small_config(3, 16));
  EXPECT_EQ(net.feature_shapes()[1][0], 80);
}

TEST(ChildNetwork, ParameterCountMatchesHandCount) {
  const Architecture a{pools_from_inputs(), pools_from_inputs()};
  const ChildNetwork net = build_network(a, small_config(3, 4));
  // stem 36 + bn 8 | cell0 2 x (16 + 8) | cell1 2 x (32 + 16) |
  // cell2 reduce (32 + 32 + 32) + (128 + 32) | head 16 * 12 + 12
  EXPECT_EQ(count_params(net), 44u + 48u + 96u + 256u + 204u);
  EXPECT_EQ(count_params(build_network(a, small_config(3, 4))), count_params(net));
}

TEST(ChildNetwork, StemScalesWithChannels) {
  Rng rng(4);
  const Architecture a = random_architecture(rng, 3);
  const ChildNetwork n8 = build_network(a, small_config(3, 8));
  const ChildNetwork n16 = build_network(a, small_config(3, 16));
  const auto stem = [](const ChildNetwork& n) { return n.params()[n.params().find("stem/conv")].value.size(); };
  EXPECT_EQ(stem(n16), 2 * stem(n8));
}

TEST(ChildNetwork, EveryParameterGetsGradient) {
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    ChildNetwork net = build_network(random_architecture(rng, 3), small_config(3, 4));
    TensorF x({4, 1, 98, 40});
    std::mt19937_64 r(trial);
    std::normal_distribution<float> nd;
    for (auto& v : x.values()) v = nd(r);
    GraphF g;
    const std::vector<int> labels = {0, 3, 5, 11};
    const Var loss = g.softmax_cross_entropy(net.forward(g, g.input(x), true), labels);
    net.params().zero_grad();
    g.backward(loss);
    for (const auto& p : net.params().all()) {
      if (!p.trainable) continue;
      bool nonzero = false;
      for (float v : p.grad.values()) nonzero |= v != 0.0F;
      EXPECT_TRUE(nonzero) << p.name;
    }
  }
}

TEST(ChildNetwork, ZeroEpochsLeavesNetworkUntouched) {
  Rng rng(6);
  NetworkConfig cfg = small_config(3, 4, 2);
  cfg.epochs = 0;
  ChildNetwork net = build_network(random_architecture(rng, 2), cfg);
  const auto before = net.params().all();
  const FeatureDataset ds = synthetic_two_tone_dataset(10, 1);
  EXPECT_TRUE(train_network(net, ds).empty());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].value, net.params().all()[i].value);
}

TEST(ChildNetwork, EvaluationMatchesManualArgmax) {
  Rng rng(7);
  ChildNetwork net = build_network(random_architecture(rng, 2), small_config(3, 4, 2));
  const FeatureDataset ds = synthetic_two_tone_dataset(10, 2);
  FeatureSplit five;
  for (std::size_t i = 0; i < 5; ++i) {
    five.push(FeatureMap(ds.train.item(i), ds.train.item(i) + kFeatureSize), ds.train.labels[i]);
  }
  GraphF g;
  TensorF x({5, 1, 98, 40}, five.features);
  const TensorF& logits = g.value(net.forward(g, g.input(x), false));
  int correct = 0;
  for (int i = 0; i < 5; ++i) {
    const int pred = logits[static_cast<std::size_t>(2 * i + 1)] > logits[static_cast<std::size_t>(2 * i)] ? 1 : 0;
    correct += pred == five.labels[static_cast<std::size_t>(i)];
  }
  const double acc = evaluate_network(net, five);
  EXPECT_DOUBLE_EQ(acc, correct / 5.0);
  EXPECT_DOUBLE_EQ(evaluate_network(net, five), acc);
  EXPECT_DOUBLE_EQ(evaluate_network(net, FeatureSplit{}), 0.0);
}

TEST(ChildNetwork, TrainingIsDeterministic) {
  Rng rng(8);
  const Architecture a = random_architecture(rng, 2);
  NetworkConfig cfg = small_config(3, 4, 2);
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const FeatureDataset ds = synthetic_two_tone_dataset(10, 3);
  ChildNetwork n1 = build_network(a, cfg), n2 = build_network(a, cfg);
  const auto h1 = train_network(n1, ds), h2 = train_network(n2, ds);
  ASSERT_EQ(h1.size(), 2u);
  for (std::size_t i = 0; i < h1.size(); ++i) {
    EXPECT_EQ(h1[i].train_loss, h2[i].train_loss);
    EXPECT_EQ(h1[i].val_acc, h2[i].val_acc);
  }
}

TEST(ChildNetwork, LearnsTwoToneTask) {
  Rng rng(9);
  const Architecture a = random_architecture(rng, 5);
  NetworkConfig cfg = small_config(3, 8, 2);
  cfg.epochs = 5;
  const FeatureDataset ds = synthetic_two_tone_dataset(100, 4);
  ChildNetwork net = build_network(a, cfg);
  const auto hist = train_network(net, ds);
  ASSERT_EQ(hist.size(), 5u);
  EXPECT_LT(hist[0].train_loss, std::log(12.0) + 0.1);
  EXPECT_LT(hist[4].train_loss, hist[0].train_loss);
  EXPECT_GE(hist[4].val_acc, 0.95);
}

TEST(ChildNetwork, CheckpointRoundTrip) {
  Rng rng(10);
  const Architecture a = random_architecture(rng, 3);
  ChildNetwork net = build_network(a, small_config(4, 4, 2));
  const auto dir = std::filesystem::temp_directory_path() / ("nao_child_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "net.ckpt").string();
  save_network(net, path);
  ChildNetwork back = load_network(path);
  EXPECT_EQ(back.architecture(), a);
  EXPECT_EQ(back.config().num_cells, 4);
  EXPECT_EQ(count_params(back), count_params(net));
  const FeatureDataset ds = synthetic_two_tone_dataset(10, 5);
  EXPECT_EQ(predict_classes(back, ds.train), predict_classes(net, ds.train));

  std::vector<EpochStats> hist = {{1, 0.5, 0.75}, {2, 0.25, 1.0}};
  write_history_csv((dir / "h.csv").string(), hist);
  std::ifstream in(dir / "h.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text, "epoch,train_loss,val_acc\n1,0.5,0.75\n2,0.25,1\n");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace nao
