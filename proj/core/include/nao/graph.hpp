#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "nao/params.hpp"
#include "nao/tensor.hpp"

namespace nao {

/// Handle to a value recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Running statistics and hyperparameters for one batch-norm layer.
template <class T>
struct BatchNormState {
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;
  /// running = keep * running + (1 - keep) * batch with keep = min(momentum, k / (k + 1))
  /// after k earlier updates, so the first updates form a plain cumulative average.
  double momentum = 0.9;
  double eps = 1e-5;
};

/// Single-owner reverse-mode tape. Every op evaluates eagerly and, when any
/// input needs a gradient, records a closure that accumulates into its inputs.
///
/// Layout conventions: images are [N, C, H, W]; sequences are [N, T, H];
/// feature rows are [N, F]. Conv weights are [O, C, k, k], depthwise weights
/// [C, 1, k, k], affine weights [in, out].
template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor<T> value, bool requires_grad = false);
  /// Leaf bound to a parameter; backward() adds its gradient into p.grad.
  Var param(Parameter<T>& p);

  const Tensor<T>& value(Var v) const { return node(v).value; }
  /// Gradient of a leaf after backward(); an empty tensor if nothing flowed in.
  const Tensor<T>& grad(Var v) const { return node(v).grad; }
  std::size_t num_nodes() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse order.
  /// Intermediate values and gradients are released as the sweep passes them;
  /// read any outputs you need first.
  void backward(Var loss);

  // -- elementwise ---------------------------------------------------------
  Var relu(Var x);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var add(Var a, Var b);
  Var scale(Var x, T factor);

  // -- dense / sequence ----------------------------------------------------
  /// Rows of `table` [V, E] picked by `ids` -> [N, E].
  Var embedding(Var table, std::span<const int> ids);
  /// x [.., I] * w [I, O] + b [O]. `b` may be an invalid Var for no bias.
  Var affine(Var x, Var w, Var b);
  /// One LSTM step with gates (i, f, g, o); weight [I + H, 4H], bias [4H].
  /// Returns (h', c').
  std::pair<Var, Var> lstm_cell(Var x, Var h, Var c, Var weight, Var bias);
  /// Bahdanau scoring v . tanh(query Wq + keys[t]) with softmax over t;
  /// returns the attention-weighted sum of `values` [N, T, Hv] -> [N, Hv].
  /// `keys` are already projected: [N, T, A]; w_query [Hq, A]; v [A].
  Var additive_attention(Var query, Var keys, Var values, Var w_query, Var v);
  /// [N, T, H] -> [N, H].
  Var mean_over_sequence(Var x);
  /// T x [N, H] -> [N, T, H].
  Var stack_sequence(std::span<const Var> steps);
  /// [N, T, H] -> [N, H] at step t.
  Var sequence_step(Var x, int t);
  /// Divides each row of the last axis by its Euclidean norm; zero rows stay zero.
  Var l2_normalize(Var x);

  // -- convolutional -------------------------------------------------------
  /// Cross-correlation without bias. With relu_input the op sees max(x, 0).
  Var conv2d(Var x, Var w, int stride, int pad, bool relu_input = false);
  Var depthwise_conv2d(Var x, Var w, int stride, int pad, bool relu_input = false);
  /// Per-channel normalization over (N, H, W). Training mode uses batch
  /// statistics and updates the running buffers; inference uses the buffers.
  Var batch_norm(Var x, Var gamma, Var beta, const BatchNormState<T>& state, bool training);
  /// 3x3 window, padding 1; average excludes padded cells.
  Var avg_pool3x3(Var x, int stride);
  Var max_pool3x3(Var x, int stride);
  /// y[h, w] = x[h + 1, w + 1], zero past the border. Used by factorized reduce.
  Var shift_crop(Var x);
  /// Concatenation along axis 1.
  Var concat_channels(std::span<const Var> xs);
  /// [N, C, H, W] -> [N, C].
  Var global_avg_pool(Var x);

  // -- losses (scalar outputs) ---------------------------------------------
  /// Sum over rows of -log softmax(logits)[target]. If `mask` is given
  /// ([N, K], 1 = allowed) disallowed logits are excluded from the softmax.
  Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask = {});
  /// Sum of (pred - target)^2.
  Var squared_error(Var pred, std::span<const T> targets);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    bool leaf = false;
  };

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  bool needs_grad(std::initializer_list<Var> vs) const;
  /// Gradient buffer of `v`, allocated as zeros on first use.
  Tensor<T>& grad_buffer(Var v);
  bool has_grad(Var v) const { return !node(v).grad.empty(); }
  Var push(Tensor<T> value, bool requires_grad, std::function<void()> backward = {});
  void check_finite(const Tensor<T>& t, const char* op) const;

  std::vector<Node> nodes_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace nao
