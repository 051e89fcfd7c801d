#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace nao {

enum class LayerKind {
  EmbeddingLookup,
  LstmCell,
  AdditiveAttention,
  Affine,
  Relu,
  MeanPoolOverSequence,
  Conv2d,
  DepthwiseConv2d,
  BatchNorm,  // training mode
  AvgPool3x3,
  MaxPool3x3,
  ConcatChannels,
  GlobalAvgPool,
  SoftmaxCrossEntropy,
  L2Normalize,
  // Helper ops used by the models.
  Tanh,
  Sigmoid,
  BatchNormInference,
  ShiftCrop,
  SquaredError,
  ConvReluInput,
};

std::vector<LayerKind> all_layer_kinds();
std::string_view layer_kind_name(LayerKind kind);

/// Largest admissible max-relative-error for `kind` (1e-3 for training-mode
/// batch norm, whose variance term amplifies finite-difference error; 1e-4 otherwise).
double gradient_tolerance(LayerKind kind);

struct GradientCheckResult {
  double max_relative_error = 0;
  std::size_t checked = 0;  // number of scalar partials compared
};

/// Builds a small random instance of `kind` in double precision, differentiates
/// the scalar loss sum((y - t)^2) (or the op's own scalar output) analytically,
/// and compares every partial against central differences with step 1e-3.
/// Relative error is |a - n| / max(|a|, |n|, 1e-2).
GradientCheckResult gradient_check(LayerKind kind, std::uint64_t seed);

}  // namespace nao
