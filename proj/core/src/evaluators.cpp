#include "nao/evaluators.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "nao/errors.hpp"

namespace nao {

double conv_fraction(const Cell& cell) {
  int conv = 0;
  for (const NodeInputs& n : cell.nodes()) conv += (is_conv(n.first.op) ? 1 : 0) + (is_conv(n.second.op) ? 1 : 0);
  return static_cast<double>(conv) / (2.0 * cell.num_intermediate());
}

int cell_depth(const Cell& cell) {
  std::vector<int> depth(static_cast<std::size_t>(cell.last_index()) + 1, 0);
  for (int i = 2; i <= cell.last_index(); ++i) {
    const NodeInputs& n = cell.node(i);
    depth[static_cast<std::size_t>(i)] =
        1 + std::max(depth[static_cast<std::size_t>(n.first.source)], depth[static_cast<std::size_t>(n.second.source)]);
  }
  int best = 0;
  for (int i : loose_ends(cell)) best = std::max(best, depth[static_cast<std::size_t>(i)]);
  return best;
}

double oracle_normal_term(const Cell& normal) {
  return 0.5 * conv_fraction(normal) + 0.3 * cell_depth(normal) / normal.num_intermediate();
}

double oracle_reduction_term(const Cell& reduction) { return 0.2 * conv_fraction(reduction); }

double synthetic_oracle(const Architecture& arch) {
  return oracle_normal_term(arch.normal()) + oracle_reduction_term(arch.reduction());
}

}  // namespace nao

namespace nao {

NetworkConfig search_network_config(int num_classes, std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.num_cells = 3;
  cfg.channels = 16;
  cfg.batch_size = 128;
  cfg.epochs = 25;
  cfg.num_classes = num_classes;
  cfg.seed = seed;
  return cfg;
}

KwsEvaluator::KwsEvaluator(std::shared_ptr<const FeatureDataset> data, NetworkConfig cfg, std::string name)
    : data_(std::move(data)), cfg_(std::move(cfg)), name_(std::move(name)) {
  if (!data_) throw std::invalid_argument("KwsEvaluator needs a dataset");
  if (data_->train.size() == 0 || data_->validation.size() == 0) {
    throw ConfigError("KWS evaluation needs non-empty train and validation splits");
  }
  cfg_.validate();
}

double KwsEvaluator::evaluate(const Architecture& arch) const {
  ChildNetwork net(arch, cfg_);
  try {
    double best = 0.0;
    for (const EpochStats& s : train_network(net, *data_)) best = std::max(best, s.val_acc);
    return best;
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string(e.what()) + " for architecture " + to_json_text(arch));
  }
}

}  // namespace nao
