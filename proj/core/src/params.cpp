#include "nao/params.hpp"

#include <cmath>
#include <stdexcept>

namespace nao {

template <class T>
ParamId ParamStore<T>::add(const std::string& name, Tensor<T> value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  const int id = static_cast<int>(params_.size());
  Parameter<T> p;
  p.name = name;
  p.grad = Tensor<T>(value.shape());
  p.value = std::move(value);
  p.trainable = trainable;
  params_.push_back(std::move(p));
  index_.emplace(name, id);
  return ParamId{id};
}

template <class T>
ParamId ParamStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return ParamId{it->second};
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.grad.fill(T(0));
}

template <class T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

template <class T>
Tensor<T> uniform_tensor(std::vector<int> shape, double bound, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> fan_in_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  return uniform_tensor<T>(std::move(shape), std::sqrt(3.0 / std::max(fan_in, 1)), rng);
}

template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    if (p.moment1.size() != p.value.size()) {
      p.moment1 = Tensor<T>(p.value.shape());
      p.moment2 = Tensor<T>(p.value.shape());
    }
    ++p.steps;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.steps));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.steps));
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* m = p.moment1.data();
    T* v = p.moment2.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
void sgd_momentum_step(ParamStore<T>& store, const SgdConfig& cfg) {
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    if (p.moment1.size() != p.value.size()) p.moment1 = Tensor<T>(p.value.shape());
    ++p.steps;
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* vel = p.moment1.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      vel[i] = static_cast<T>(cfg.momentum * vel[i] + g[i]);
      w[i] = static_cast<T>(w[i] - cfg.lr * (vel[i] + cfg.weight_decay * w[i]));
    }
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template Tensor<float> uniform_tensor<float>(std::vector<int>, double, std::mt19937_64&);
template Tensor<double> uniform_tensor<double>(std::vector<int>, double, std::mt19937_64&);
template Tensor<float> fan_in_uniform<float>(std::vector<int>, int, std::mt19937_64&);
template Tensor<double> fan_in_uniform<double>(std::vector<int>, int, std::mt19937_64&);
template void adam_step<float>(ParamStore<float>&, const AdamConfig&);
template void adam_step<double>(ParamStore<double>&, const AdamConfig&);
template void sgd_momentum_step<float>(ParamStore<float>&, const SgdConfig&);
template void sgd_momentum_step<double>(ParamStore<double>&, const SgdConfig&);

}  // namespace nao
