#pragma once

#include <string>
#include <vector>

#include "moelab/layers.hpp"

namespace moelab {

// Where a routing decision came from.
enum class RoutingSource { Stage1Greedy, DistilledFrozen, Switch, Auction, Hash, Dense };

const char* to_string(RoutingSource source);

struct RoutingDecision {
  Tensor scores;                    // [t, n]; undefined for table and dense routing
  std::vector<int64_t> assignment;  // chosen expert per token
  Tensor gate;                      // [t]; undefined when hard_gate
  RoutingSource source = RoutingSource::Stage1Greedy;
  bool hard_gate = false;           // gate identically one, no scaling recorded
};

struct MoeConfig {
  int64_t num_experts = 8;
  int64_t expert_inner_dim = 512;
  int64_t sublayers_per_expert = 2;
  double balance_alpha = 0.3;

  void validate() const;
};

// N disjoint expert stacks over the model width.
class ExpertBank {
 public:
  ExpertBank(int64_t dim, const MoeConfig& cfg, Rng& rng);

  int64_t num_experts() const { return static_cast<int64_t>(experts_.size()); }

  // Runs each row of x through its assigned expert; invalid indices throw.
  Tensor forward(const Tensor& x, const std::vector<int64_t>& assignment) const;

  void register_params(ParamList& params, const std::string& prefix) const;

  const FfnStack& expert(int64_t i) const { return experts_.at(static_cast<size_t>(i)); }
  FfnStack& expert(int64_t i) { return experts_.at(static_cast<size_t>(i)); }

 private:
  std::vector<FfnStack> experts_;
};

// Argmax over each score row; ties pick the lowest expert index.
std::vector<int64_t> greedy_assign(const Tensor& scores);

// gate[t] = sigmoid(scores[t, assignment[t]]), recorded on the tape.
Tensor sigmoid_gate(const Tensor& scores, const std::vector<int64_t>& assignment);

// gate[t] = softmax(scores[t])[assignment[t]].
Tensor softmax_gate(const Tensor& scores, const std::vector<int64_t>& assignment);

// out = h + gate * experts(x), where x is the normalized sublayer input and
// h the residual stream.
Tensor moe_forward(const Tensor& h, const Tensor& x, const RoutingDecision& decision,
                   const ExpertBank& bank);

}  // namespace moelab
