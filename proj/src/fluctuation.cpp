#include "moelab/fluctuation.hpp"

#include <algorithm>
#include <string>

#include "moelab/errors.hpp"

namespace moelab {

AssignmentHistory::AssignmentHistory(std::vector<int64_t> token_stream)
    : token_stream_(std::move(token_stream)) {
  if (token_stream_.empty()) {
    throw ContractError("assignment history needs a nonempty token stream");
  }
}

void AssignmentHistory::record(int64_t step, std::vector<int64_t> assignment) {
  if (!steps_.empty() && step <= steps_.back()) {
    throw ContractError("snapshot step " + std::to_string(step) +
                        " not after previous step " + std::to_string(steps_.back()));
  }
  if (assignment.size() != token_stream_.size()) {
    throw ContractError("snapshot covers " + std::to_string(assignment.size()) +
                        " tokens, stream has " + std::to_string(token_stream_.size()));
  }
  steps_.push_back(step);
  snapshots_.push_back(std::move(assignment));
}

std::optional<int64_t> last_fluctuation_step(const AssignmentHistory& history,
                                             int64_t token) {
  const int64_t snaps = history.num_snapshots();
  if (snaps == 0) throw ContractError("no snapshots recorded");
  if (token < 0 || token >= history.num_tokens()) {
    throw IndexError("token position " + std::to_string(token) + " outside stream of " +
                     std::to_string(history.num_tokens()));
  }
  const int64_t final_expert = history.snapshot(snaps - 1)[static_cast<size_t>(token)];
  for (int64_t i = snaps - 2; i >= 0; --i) {
    if (history.snapshot(i)[static_cast<size_t>(token)] != final_expert) {
      return history.steps()[static_cast<size_t>(i)];
    }
  }
  return std::nullopt;
}

std::vector<CurvePoint> cumulative_curve(const AssignmentHistory& history,
                                         int64_t total_steps) {
  const int64_t snaps = history.num_snapshots();
  if (snaps == 0) throw ContractError("no snapshots recorded");
  if (total_steps < history.steps().back()) {
    throw ContractError("total_steps " + std::to_string(total_steps) +
                        " smaller than last snapshot step " +
                        std::to_string(history.steps().back()));
  }
  const int64_t tokens = history.num_tokens();
  std::vector<int64_t> settled_by_step(static_cast<size_t>(tokens));
  for (int64_t t = 0; t < tokens; ++t) {
    auto last = last_fluctuation_step(history, t);
    settled_by_step[static_cast<size_t>(t)] = last ? *last : 0;
  }
  std::vector<CurvePoint> curve;
  curve.reserve(static_cast<size_t>(snaps) + 1);
  auto fraction_settled = [&](int64_t step_bound) {
    int64_t count = 0;
    for (int64_t s : settled_by_step) count += s <= step_bound ? 1 : 0;
    return static_cast<double>(count) / static_cast<double>(tokens);
  };
  curve.push_back({0.0, fraction_settled(0)});
  for (int64_t i = 0; i < snaps; ++i) {
    const int64_t step = history.steps()[static_cast<size_t>(i)];
    curve.push_back({static_cast<double>(step) / static_cast<double>(total_steps),
                     fraction_settled(step)});
  }
  if (history.steps().back() < total_steps) {
    curve.push_back({1.0, 1.0});
  }
  return curve;
}

std::vector<ExpertTokens> expert_token_report(const std::vector<int64_t>& assignment,
                                              const std::vector<int64_t>& token_ids,
                                              int64_t num_experts, int64_t top_k) {
  if (assignment.size() != token_ids.size()) {
    throw ContractError("assignment and token stream sizes differ");
  }
  if (num_experts < 1) throw ContractError("need at least one expert");
  if (top_k < 1) throw ContractError("top_k must be positive");

  // counts[expert][token id] -> occurrences
  int64_t max_id = 0;
  for (int64_t id : token_ids) max_id = std::max(max_id, id);
  std::vector<std::vector<int64_t>> counts(
      static_cast<size_t>(num_experts),
      std::vector<int64_t>(static_cast<size_t>(max_id) + 1, 0));
  std::vector<int64_t> loads(static_cast<size_t>(num_experts), 0);
  for (size_t i = 0; i < assignment.size(); ++i) {
    const int64_t e = assignment[i];
    if (e < 0 || e >= num_experts) {
      throw IndexError("expert " + std::to_string(e) + " outside " +
                       std::to_string(num_experts));
    }
    if (token_ids[i] < 0) throw IndexError("negative token id");
    ++counts[static_cast<size_t>(e)][static_cast<size_t>(token_ids[i])];
    ++loads[static_cast<size_t>(e)];
  }

  std::vector<ExpertTokens> report(static_cast<size_t>(num_experts));
  for (int64_t e = 0; e < num_experts; ++e) {
    auto& entry = report[static_cast<size_t>(e)];
    entry.expert = e;
    entry.load = loads[static_cast<size_t>(e)];
    std::vector<std::pair<int64_t, int64_t>> pairs;  // (token id, count)
    for (int64_t id = 0; id <= max_id; ++id) {
      const int64_t c = counts[static_cast<size_t>(e)][static_cast<size_t>(id)];
      if (c > 0) pairs.emplace_back(id, c);
    }
    std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (static_cast<int64_t>(pairs.size()) > top_k) {
      pairs.resize(static_cast<size_t>(top_k));
    }
    entry.top = std::move(pairs);
  }
  return report;
}

BalanceStats balance_stats(const std::vector<int64_t>& assignment, int64_t num_experts) {
  if (num_experts < 1) throw ContractError("need at least one expert");
  if (assignment.empty()) throw ContractError("empty assignment");
  BalanceStats stats;
  stats.loads.assign(static_cast<size_t>(num_experts), 0);
  for (int64_t e : assignment) {
    if (e < 0 || e >= num_experts) {
      throw IndexError("expert " + std::to_string(e) + " outside " +
                       std::to_string(num_experts));
    }
    ++stats.loads[static_cast<size_t>(e)];
  }
  const int64_t max_load = *std::max_element(stats.loads.begin(), stats.loads.end());
  const double mean =
      static_cast<double>(assignment.size()) / static_cast<double>(num_experts);
  stats.max_over_mean = static_cast<double>(max_load) / mean;
  return stats;
}

}  // namespace moelab
