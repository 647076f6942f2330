#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace moelab {

// Expert assignments for one fixed token stream, sampled at increasing
// training steps.
class AssignmentHistory {
 public:
  explicit AssignmentHistory(std::vector<int64_t> token_stream);

  // Steps must arrive strictly increasing, assignments must cover the stream.
  void record(int64_t step, std::vector<int64_t> assignment);

  int64_t num_tokens() const { return static_cast<int64_t>(token_stream_.size()); }
  int64_t num_snapshots() const { return static_cast<int64_t>(steps_.size()); }
  const std::vector<int64_t>& token_stream() const { return token_stream_; }
  const std::vector<int64_t>& steps() const { return steps_; }
  const std::vector<int64_t>& snapshot(int64_t i) const {
    return snapshots_.at(static_cast<size_t>(i));
  }

 private:
  std::vector<int64_t> token_stream_;
  std::vector<int64_t> steps_;
  std::vector<std::vector<int64_t>> snapshots_;
};

// Largest snapshot step at which the token's expert differs from its final
// one; empty when it never moved. A single snapshot has nothing to compare.
std::optional<int64_t> last_fluctuation_step(const AssignmentHistory& history,
                                             int64_t token);

struct CurvePoint {
  double fraction_of_steps = 0.0;
  double cumulative_token_fraction = 0.0;
};

// Share of tokens whose routing had settled by each snapshot fraction.
// Tokens that never moved count from fraction zero, so the curve starts at
// their share and always ends at one.
std::vector<CurvePoint> cumulative_curve(const AssignmentHistory& history,
                                         int64_t total_steps);

struct ExpertTokens {
  int64_t expert = 0;
  int64_t load = 0;                                    // tokens routed here
  std::vector<std::pair<int64_t, int64_t>> top;        // (token id, count)
};

// Most frequent token ids per expert under one assignment of a stream.
// Count ties resolve toward the lower token id.
std::vector<ExpertTokens> expert_token_report(const std::vector<int64_t>& assignment,
                                              const std::vector<int64_t>& token_ids,
                                              int64_t num_experts, int64_t top_k);

struct BalanceStats {
  std::vector<int64_t> loads;
  double max_over_mean = 0.0;
};

BalanceStats balance_stats(const std::vector<int64_t>& assignment, int64_t num_experts);

}  // namespace moelab
