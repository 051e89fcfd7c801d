#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nao/arch_space.hpp"
#include "nao/audio_frontend.hpp"
#include "nao/graph.hpp"
#include "nao/params.hpp"

namespace nao {

struct NetworkConfig {
  int num_cells = 12;  // L
  int channels = 16;   // C
  int num_classes = 12;
  int input_height = kNumFrames;
  int input_width = kNumCoeffs;
  int epochs = 25;
  int batch_size = 128;
  SgdConfig sgd{};  // lr is the cosine starting point
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

/// Parameter handles for one ReLU -> conv -> BN style unit.
struct BnIds {
  ParamId gamma, beta, mean, var;
};

/// One edge of one cell, resolved to concrete layers.
struct EdgeLayer {
  OpKind op = OpKind::Identity;
  int source = 0;
  int stride = 1;
  int kernel = 0;
  // Sep-conv: two stacked (depthwise, pointwise, bn) blocks.
  ParamId dw[2], pw[2];
  BnIds bn[2];
  // Stride-2 identity: factorized reduce.
  ParamId fr[2];
  BnIds fr_bn;
};

struct CellLayer {
  bool reduction = false;
  int channels = 0;       // working width C_k
  int out_channels = 0;   // |loose ends| * C_k
  int height = 0, width = 0;  // output spatial size
  bool reduce_s0 = false;     // s0 arrives at twice the resolution
  ParamId pre0, pre1;         // 1x1 projections (pre0 unused when reduce_s0)
  ParamId pre0_fr[2];
  BnIds pre0_bn, pre1_bn;
  std::vector<EdgeLayer> edges;  // 2 per intermediate node
  std::vector<int> outputs;      // loose ends, ascending
  /// Reduction cells: factorized reduce for loose-end input nodes (index 0 or 1).
  ParamId out_fr[2][2];
  BnIds out_fr_bn[2];
};

class ChildNetwork {
 public:
  ChildNetwork(const Architecture& arch, const NetworkConfig& cfg);

  const Architecture& architecture() const noexcept { return arch_; }
  const NetworkConfig& config() const noexcept { return cfg_; }
  ParamStoreF& params() noexcept { return params_; }
  const ParamStoreF& params() const noexcept { return params_; }
  const std::vector<CellLayer>& cells() const noexcept { return cells_; }
  std::vector<int> reduction_indices() const;

  /// Logits [N, classes] for a [N, 1, H, W] batch.
  Var forward(GraphF& g, Var x, bool training);
  /// Shape trace for tests: the [C, H, W] after the stem and after every cell.
  std::vector<std::array<int, 3>> feature_shapes() const;

 private:
  BnIds add_bn(const std::string& name, int channels);
  Var apply_bn(GraphF& g, Var x, const BnIds& ids, bool training);
  void add_factorized_reduce(const std::string& name, int in_c, int out_c, ParamId (&w)[2], BnIds& bn);
  Var factorized_reduce(GraphF& g, Var x, const ParamId (&w)[2], const BnIds& bn, bool training);
  Var edge_forward(GraphF& g, Var x, const EdgeLayer& e, bool training);

  Architecture arch_;
  NetworkConfig cfg_;
  ParamStoreF params_;
  ParamId stem_w_;
  BnIds stem_bn_;
  std::vector<CellLayer> cells_;
  ParamId head_w_, head_b_;
  int stem_height_ = 0, stem_width_ = 0;
};

ChildNetwork build_network(const Architecture& arch, const NetworkConfig& cfg);
/// Exact number of trainable scalars.
std::size_t count_params(const ChildNetwork& net);

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_acc = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// SGD with momentum, cosine lr from cfg.sgd.lr to 0, per-epoch shuffles from
/// cfg.seed. Validation accuracy is NaN-free 0 when the split is empty.
std::vector<EpochStats> train_network(ChildNetwork& net, const FeatureDataset& data,
                                      const EpochCallback& on_epoch = {});
/// Inference-mode accuracy in [0, 1]; 0 for an empty split.
double evaluate_network(ChildNetwork& net, const FeatureSplit& split);
/// Argmax class per item.
std::vector<int> predict_classes(ChildNetwork& net, const FeatureSplit& split);

/// Optional header lines are written first, each prefixed with "# ".
void write_history_csv(const std::string& path, const std::vector<EpochStats>& history,
                       const std::vector<std::string>& header_comment = {});

/// Parameters are stored under "child/"; the architecture and L/C/classes are
/// kept under "child_meta/" so a checkpoint is self-describing.
void save_network(const ChildNetwork& net, const std::string& path);
ChildNetwork load_network(const std::string& path);

}  // namespace nao
