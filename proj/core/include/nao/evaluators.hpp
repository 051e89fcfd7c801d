#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "nao/arch_space.hpp"
#include "nao/audio_frontend.hpp"
#include "nao/child_network.hpp"

namespace nao {

/// Scores an architecture in [0, 1]. Implementations are deterministic in
/// (arch, seed) and safe to call concurrently.
class ArchEvaluator {
 public:
  virtual ~ArchEvaluator() = default;
  virtual double evaluate(const Architecture& arch) const = 0;
  virtual std::string descriptor() const = 0;
};

/// Fraction of the 2B edges whose op is a separable convolution.
double conv_fraction(const Cell& cell);
/// Longest edge path from an input node to any loose end.
int cell_depth(const Cell& cell);

/// 0.5 conv_frac(normal) + 0.3 depth(normal) / B + 0.2 conv_frac(reduction).
double synthetic_oracle(const Architecture& arch);

/// The two separable terms of synthetic_oracle.
double oracle_normal_term(const Cell& normal);
double oracle_reduction_term(const Cell& reduction);

class OracleEvaluator final : public ArchEvaluator {
 public:
  double evaluate(const Architecture& arch) const override { return synthetic_oracle(arch); }
  std::string descriptor() const override { return "oracle"; }
};

/// Search-time child-network settings: 3 cells, 16 channels, batch 128, 25 epochs.
NetworkConfig search_network_config(int num_classes, std::uint64_t seed);

/// Trains the child network for `arch` and returns the best validation
/// accuracy over all epochs.
class KwsEvaluator final : public ArchEvaluator {
 public:
  KwsEvaluator(std::shared_ptr<const FeatureDataset> data, NetworkConfig cfg, std::string name);
  double evaluate(const Architecture& arch) const override;
  std::string descriptor() const override { return name_; }
  const NetworkConfig& config() const noexcept { return cfg_; }

 private:
  std::shared_ptr<const FeatureDataset> data_;
  NetworkConfig cfg_;
  std::string name_;
};

}  // namespace nao
