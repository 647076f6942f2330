#pragma once

#include <string>
#include <vector>

#include "moelab/ops.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Named parameter registry. Modules append their tensors at construction;
// the order is deterministic and drives checkpoint layout.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

// y = x W + b with W:[in,out].
struct Linear {
  Tensor w, b;

  // zero_w selects the zero init used for sublayer output projections.
  Linear(int64_t in, int64_t out, Rng& rng, bool zero_w = false);
  Tensor forward(const Tensor& x) const { return ops::add_bias(ops::matmul(x, w), b); }
  void register_params(ParamList& params, const std::string& prefix) const;
};

struct LayerNormParams {
  Tensor gamma, beta;

  explicit LayerNormParams(int64_t dim);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
  void register_params(ParamList& params, const std::string& prefix) const;
};

// A stack of position-wise feed-forward sublayers applied in sequence:
// x -> W2 gelu(W1 x + b1) + b2, repeated. No residual inside the stack, so
// zero-initialized W2 makes the whole stack output exactly zero.
struct FfnStack {
  std::vector<Linear> in_proj;
  std::vector<Linear> out_proj;

  FfnStack(int64_t dim, int64_t inner, int64_t sublayers, Rng& rng);
  Tensor forward(Tensor x) const;
  void register_params(ParamList& params, const std::string& prefix) const;
};

}  // namespace moelab
