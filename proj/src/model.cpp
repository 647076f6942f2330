#include "moelab/model.hpp"

namespace moelab {

void ModelConfig::validate() const {
  backbone.validate();
  moe.validate();
  if (router_feature_dim < 1) throw ConfigError("router_feature_dim must be positive");
  if (!(auction_epsilon_scale > 0.0)) {
    throw ConfigError("auction_epsilon_scale must be positive");
  }
}

namespace {

bool uses_centroids(RouterKind kind) {
  return kind == RouterKind::StableMoe || kind == RouterKind::StableMoeStage1 ||
         kind == RouterKind::Switch || kind == RouterKind::Base;
}

bool two_stage(RouterKind kind) {
  return kind == RouterKind::StableMoe || kind == RouterKind::StableMoeStage1;
}

}  // namespace

Model::Model(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  backbone_ = std::make_unique<Backbone>(cfg_.backbone, rng);
  ln_moe_ = std::make_unique<LayerNormParams>(cfg_.backbone.hidden_dim);
  if (uses_centroids(cfg_.router)) {
    centroids_ = Tensor::randn({cfg_.moe.num_experts, cfg_.backbone.hidden_dim}, rng, 0.02f,
                               /*requires_grad=*/true);
  }
  MoeConfig bank_cfg = cfg_.moe;
  if (cfg_.router == RouterKind::Dense) bank_cfg.num_experts = 1;
  bank_ = std::make_unique<ExpertBank>(cfg_.backbone.hidden_dim, bank_cfg, rng);
  if (two_stage(cfg_.router)) {
    router_ = std::make_unique<DistilledRouter>(cfg_.backbone.vocab_size,
                                                cfg_.moe.num_experts,
                                                cfg_.router_feature_dim, rng);
  }
  if (cfg_.router == RouterKind::Hash) {
    hash_table_ = build_hash_table(cfg_.backbone.vocab_size, cfg_.moe.num_experts,
                                   cfg_.hash_seed);
  }

  backbone_->register_params(params_);
  ln_moe_->register_params(params_, "ln_moe");
  if (centroids_.defined()) params_.emplace_back("centroids", centroids_);
  bank_->register_params(params_, "bank");
  if (router_) router_->register_params(params_, "router");
}

RoutingDecision Model::route_for_forward(const Tensor& x, const std::vector<int64_t>& tokens,
                                         int stage) {
  RoutingDecision d;
  switch (cfg_.router) {
    case RouterKind::StableMoe:
    case RouterKind::StableMoeStage1: {
      d.scores = ops::matmul_t(x, centroids_);
      if (stage == 1 || cfg_.router == RouterKind::StableMoeStage1) {
        d.assignment = greedy_assign(d.scores);
        d.source = RoutingSource::Stage1Greedy;
      } else {
        if (!router_->is_frozen()) {
          throw ContractError("stage 2 forward requires a frozen routing head");
        }
        d.assignment = router_->assign(tokens);
        d.source = RoutingSource::DistilledFrozen;
      }
      d.gate = sigmoid_gate(d.scores, d.assignment);
      break;
    }
    case RouterKind::Switch: {
      d.scores = ops::matmul_t(x, centroids_);
      d.assignment = greedy_assign(d.scores);
      d.gate = softmax_gate(d.scores, d.assignment);
      d.source = RoutingSource::Switch;
      break;
    }
    case RouterKind::Base: {
      d.scores = ops::matmul_t(x, centroids_);
      d.assignment = auction_assign(d.scores, cfg_.auction_epsilon_scale);
      d.gate = sigmoid_gate(d.scores, d.assignment);
      d.source = RoutingSource::Auction;
      break;
    }
    case RouterKind::Hash: {
      d.assignment = hash_assign(hash_table_, tokens);
      d.hard_gate = true;
      d.source = RoutingSource::Hash;
      break;
    }
    case RouterKind::Dense: {
      d.assignment.assign(tokens.size(), 0);
      d.hard_gate = true;
      d.source = RoutingSource::Dense;
      break;
    }
  }
  return d;
}

ForwardResult Model::forward(const std::vector<int64_t>& tokens,
                             const std::vector<int64_t>& targets, int64_t seq_len,
                             int stage) {
  if (stage != 1 && stage != 2) {
    throw ContractError("stage must be 1 or 2, got " + std::to_string(stage));
  }
  Tensor h = backbone_->front(backbone_->embed(tokens, seq_len), seq_len);
  Tensor x = ln_moe_->forward(h);
  ForwardResult result;
  result.decision = route_for_forward(x, tokens, stage);
  h = moe_forward(h, x, result.decision, *bank_);
  h = backbone_->back(h, seq_len);
  result.task = lm_loss(backbone_->logits(h), targets);
  result.total = result.task;

  const bool learning_stage = stage == 1 || cfg_.router == RouterKind::StableMoeStage1;
  if (two_stage(cfg_.router) && learning_stage) {
    result.balance = ops::balance_loss(result.decision.scores, result.decision.assignment,
                                       cfg_.moe.balance_alpha);
    result.distill = router_->distillation_loss(tokens, result.decision.assignment,
                                                cfg_.distill_reduction);
    result.total = ops::add(ops::add(result.total, result.balance), result.distill);
  } else if (cfg_.router == RouterKind::Switch) {
    result.balance = ops::balance_loss(result.decision.scores, result.decision.assignment,
                                       cfg_.moe.balance_alpha, ops::BalanceGate::Softmax);
    result.total = ops::add(result.total, result.balance);
  }
  return result;
}

std::vector<int64_t> Model::route_tokens(const std::vector<int64_t>& tokens,
                                         int64_t seq_len) {
  switch (cfg_.router) {
    case RouterKind::Hash:
      return hash_assign(hash_table_, tokens);
    case RouterKind::Dense:
      return std::vector<int64_t>(tokens.size(), 0);
    case RouterKind::StableMoe:
      if (router_->is_frozen()) return router_->assign(tokens);
      break;
    default:
      break;
  }
  Tensor h = backbone_->front(backbone_->embed(tokens, seq_len), seq_len);
  Tensor x = ln_moe_->forward(h);
  Tensor scores = ops::matmul_t(x, centroids_);
  if (cfg_.router == RouterKind::Base) {
    return auction_assign(scores, cfg_.auction_epsilon_scale);
  }
  return greedy_assign(scores);
}

}  // namespace moelab
