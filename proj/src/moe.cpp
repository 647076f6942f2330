#include "moelab/moe.hpp"

namespace moelab {

const char* to_string(RoutingSource source) {
  switch (source) {
    case RoutingSource::Stage1Greedy: return "stage1-greedy";
    case RoutingSource::DistilledFrozen: return "distilled-frozen";
    case RoutingSource::Switch: return "switch";
    case RoutingSource::Auction: return "auction";
    case RoutingSource::Hash: return "hash";
    case RoutingSource::Dense: return "dense";
  }
  return "unknown";
}

void MoeConfig::validate() const {
  if (num_experts < 1) throw ConfigError("num_experts must be at least 1");
  if (expert_inner_dim < 1) throw ConfigError("expert_inner_dim must be positive");
  if (sublayers_per_expert < 1) throw ConfigError("sublayers_per_expert must be at least 1");
  if (balance_alpha < 0.0) throw ConfigError("balance_alpha must be nonnegative");
}

ExpertBank::ExpertBank(int64_t dim, const MoeConfig& cfg, Rng& rng) {
  cfg.validate();
  experts_.reserve(static_cast<size_t>(cfg.num_experts));
  for (int64_t e = 0; e < cfg.num_experts; ++e) {
    experts_.emplace_back(dim, cfg.expert_inner_dim, cfg.sublayers_per_expert, rng);
  }
}

Tensor ExpertBank::forward(const Tensor& x, const std::vector<int64_t>& assignment) const {
  const int64_t t = x.rows();
  if (static_cast<int64_t>(assignment.size()) != t) {
    throw DimensionError("assignment size " + std::to_string(assignment.size()) +
                         " does not match " + std::to_string(t) + " tokens");
  }
  const int64_t n = num_experts();
  std::vector<std::vector<int64_t>> groups(static_cast<size_t>(n));
  for (int64_t r = 0; r < t; ++r) {
    const int64_t a = assignment[static_cast<size_t>(r)];
    if (a < 0 || a >= n) {
      throw IndexError("expert index " + std::to_string(a) + " outside " +
                       std::to_string(n) + " experts");
    }
    groups[static_cast<size_t>(a)].push_back(r);
  }
  std::vector<Tensor> parts;
  std::vector<std::vector<int64_t>> indices;
  for (int64_t e = 0; e < n; ++e) {
    auto& rows = groups[static_cast<size_t>(e)];
    if (rows.empty()) continue;
    parts.push_back(experts_[static_cast<size_t>(e)].forward(ops::gather_rows(x, rows)));
    indices.push_back(std::move(rows));
  }
  return ops::assemble_rows(t, parts, indices);
}

void ExpertBank::register_params(ParamList& params, const std::string& prefix) const {
  for (size_t e = 0; e < experts_.size(); ++e) {
    experts_[e].register_params(params, prefix + ".expert" + std::to_string(e));
  }
}

std::vector<int64_t> greedy_assign(const Tensor& scores) {
  const int64_t t = scores.rows(), n = scores.cols();
  if (n < 1) throw ContractError("greedy_assign needs at least one expert");
  auto sv = scores.values();
  std::vector<int64_t> out(static_cast<size_t>(t));
  for (int64_t r = 0; r < t; ++r) {
    const float* row = sv.data() + r * n;
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

Tensor sigmoid_gate(const Tensor& scores, const std::vector<int64_t>& assignment) {
  return ops::sigmoid(ops::gather_cols(scores, assignment));
}

Tensor softmax_gate(const Tensor& scores, const std::vector<int64_t>& assignment) {
  return ops::gather_cols(ops::row_softmax(scores), assignment);
}

Tensor moe_forward(const Tensor& h, const Tensor& x, const RoutingDecision& decision,
                   const ExpertBank& bank) {
  Tensor y = bank.forward(x, decision.assignment);
  if (decision.hard_gate) return ops::add(h, y);
  return ops::add(h, ops::scale_rows(y, decision.gate));
}

}  // namespace moelab
