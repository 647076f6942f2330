#include "moelab/layers.hpp"

namespace moelab {

namespace {
constexpr float kInitStddev = 0.02f;
}

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool zero_w)
    : w(zero_w ? Tensor::zeros({in, out}, true)
               : Tensor::randn({in, out}, rng, kInitStddev, true)),
      b(Tensor::zeros({out}, true)) {}

void Linear::register_params(ParamList& params, const std::string& prefix) const {
  params.emplace_back(prefix + ".w", w);
  params.emplace_back(prefix + ".b", b);
}

LayerNormParams::LayerNormParams(int64_t dim)
    : gamma(Tensor::full({dim}, 1.0f, true)), beta(Tensor::zeros({dim}, true)) {}

void LayerNormParams::register_params(ParamList& params, const std::string& prefix) const {
  params.emplace_back(prefix + ".gamma", gamma);
  params.emplace_back(prefix + ".beta", beta);
}

FfnStack::FfnStack(int64_t dim, int64_t inner, int64_t sublayers, Rng& rng) {
  if (sublayers < 1) throw ContractError("FfnStack: sublayers must be >= 1");
  in_proj.reserve(sublayers);
  out_proj.reserve(sublayers);
  for (int64_t s = 0; s < sublayers; ++s) {
    in_proj.emplace_back(dim, inner, rng);
    out_proj.emplace_back(inner, dim, rng, /*zero_w=*/true);
  }
}

Tensor FfnStack::forward(Tensor x) const {
  for (size_t s = 0; s < in_proj.size(); ++s) {
    x = out_proj[s].forward(ops::gelu(in_proj[s].forward(x)));
  }
  return x;
}

void FfnStack::register_params(ParamList& params, const std::string& prefix) const {
  for (size_t s = 0; s < in_proj.size(); ++s) {
    const std::string tag = prefix + ".sub" + std::to_string(s);
    in_proj[s].register_params(params, tag + ".in");
    out_proj[s].register_params(params, tag + ".out");
  }
}

}  // namespace moelab
