#pragma once

#include <memory>
#include <vector>

#include "moelab/backbone.hpp"
#include "moelab/moe.hpp"
#include "moelab/routers.hpp"

namespace moelab {

struct ModelConfig {
  BackboneConfig backbone;
  MoeConfig moe;
  RouterKind router = RouterKind::StableMoe;
  int64_t router_feature_dim = 50;
  ops::Reduction distill_reduction = ops::Reduction::Sum;
  double auction_epsilon_scale = 1e-3;
  uint64_t hash_seed = 1;

  void validate() const;
};

struct ForwardResult {
  Tensor task;     // mean next-token cross entropy
  Tensor balance;  // defined only when a balance term entered the loss
  Tensor distill;  // defined only while the routing head is being taught
  Tensor total;
  RoutingDecision decision;
};

// Language model with one expert layer spliced into the middle of the
// backbone. The router kind fixes how tokens reach experts and which loss
// terms exist; the dense kind collapses the bank to a single always-on stack.
class Model {
 public:
  Model(ModelConfig cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  int64_t active_experts() const { return bank_->num_experts(); }

  // stage is 1 or 2; only the two-stage kind changes behavior with it.
  // Stage 2 requires the routing head to be frozen.
  ForwardResult forward(const std::vector<int64_t>& tokens,
                        const std::vector<int64_t>& targets, int64_t seq_len, int stage);

  // Expert choice per token under the model's current routing, off the tape.
  std::vector<int64_t> route_tokens(const std::vector<int64_t>& tokens, int64_t seq_len);

  DistilledRouter* distilled_router() { return router_.get(); }
  const DistilledRouter* distilled_router() const { return router_.get(); }

  Backbone& backbone() { return *backbone_; }
  const Backbone& backbone() const { return *backbone_; }
  Tensor centroids() const { return centroids_; }
  const HashTable& hash_table() const { return hash_table_; }

 private:
  RoutingDecision route_for_forward(const Tensor& x, const std::vector<int64_t>& tokens,
                                    int stage);

  ModelConfig cfg_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<LayerNormParams> ln_moe_;
  Tensor centroids_;  // [experts, hidden]; undefined for hash and dense kinds
  std::unique_ptr<ExpertBank> bank_;
  std::unique_ptr<DistilledRouter> router_;  // two-stage kinds only
  HashTable hash_table_;                     // hash kind only
  ParamList params_;
};

}  // namespace moelab
