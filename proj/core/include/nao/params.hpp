#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "nao/tensor.hpp"

namespace nao {

/// A named trainable tensor, its gradient buffer and optimizer state.
/// Non-trainable entries (batch-norm running statistics) share the store so
/// that checkpoints capture them.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> moment1;  // Adam m / SGD velocity
  Tensor<T> moment2;  // Adam v
  std::int64_t steps = 0;
  bool trainable = true;
};

/// Stable integer handle into a ParamStore; survives cloning.
struct ParamId {
  int index = -1;
  bool valid() const noexcept { return index >= 0; }
};

template <class T>
class ParamStore {
 public:
  /// Throws std::invalid_argument if `name` already exists.
  ParamId add(const std::string& name, Tensor<T> value, bool trainable = true);

  Parameter<T>& operator[](ParamId id) { return params_.at(static_cast<std::size_t>(id.index)); }
  const Parameter<T>& operator[](ParamId id) const {
    return params_.at(static_cast<std::size_t>(id.index));
  }
  /// Throws std::out_of_range for unknown names.
  ParamId find(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  std::vector<Parameter<T>>& all() noexcept { return params_; }
  const std::vector<Parameter<T>>& all() const noexcept { return params_; }

  void zero_grad();
  /// Number of trainable scalars.
  std::size_t trainable_count() const;

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, int> index_;
};

using ParamStoreF = ParamStore<float>;

/// Uniform(-bound, bound) fill from a seeded stream.
template <class T>
Tensor<T> uniform_tensor(std::vector<int> shape, double bound, std::mt19937_64& rng);

/// Variance-1/fan_in uniform init used for convolutions and affine layers.
template <class T>
Tensor<T> fan_in_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng);

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every trainable parameter with a populated gradient.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg);

struct SgdConfig {
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 3e-4;
};

/// velocity = momentum * velocity + grad; w -= lr * (velocity + weight_decay * w).
template <class T>
void sgd_momentum_step(ParamStore<T>& store, const SgdConfig& cfg);

}  // namespace nao
