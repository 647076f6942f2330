#pragma once

#include <string>
#include <vector>

#include "moelab/moe.hpp"

namespace moelab {

enum class RouterKind { StableMoe, StableMoeStage1, Switch, Base, Hash, Dense };

std::string to_string(RouterKind kind);
RouterKind router_kind_from_string(const std::string& name);

// Lightweight routing head keyed only by token id: word-embedding features
// scored against expert centroids. It trains jointly during stage 1 and is
// frozen at the stage boundary.
class DistilledRouter {
 public:
  DistilledRouter(int64_t vocab_size, int64_t num_experts, int64_t feature_dim, Rng& rng);

  Tensor features(const std::vector<int64_t>& ids) const;
  Tensor scores(const std::vector<int64_t>& ids) const;

  // Cross entropy of the router's scores against the teacher assignment;
  // recorded as "distillation_loss".
  Tensor distillation_loss(const std::vector<int64_t>& ids,
                           const std::vector<int64_t>& teacher,
                           ops::Reduction reduction) const;

  // Argmax routing from token ids alone, off the tape. Ties pick the lowest
  // expert index. Valid before and after freezing.
  std::vector<int64_t> assign(const std::vector<int64_t>& ids) const;

  // Detaches both tables from training and fixes their checksum. Idempotent.
  void freeze();
  bool is_frozen() const { return frozen_; }

  uint64_t checksum() const;
  uint64_t frozen_checksum() const { return frozen_sum_; }

  // Throws IntegrityError if the frozen parameter bytes have drifted.
  void verify_unchanged() const;

  // Binary export: JSON manifest plus little-endian float32 blobs for both
  // tables, each with its own checksum. Only a frozen router may be exported.
  void export_file(const std::string& path, uint64_t seed) const;
  static DistilledRouter import_file(const std::string& path);

  void register_params(ParamList& params, const std::string& prefix) const;

  int64_t vocab_size() const { return word_table.rows(); }
  int64_t num_experts() const { return centroids.rows(); }
  int64_t feature_dim() const { return centroids.cols(); }

  Tensor word_table;  // [vocab, feature_dim]
  Tensor centroids;   // [experts, feature_dim]

 private:
  DistilledRouter() = default;

  bool frozen_ = false;
  uint64_t frozen_sum_ = 0;
};

// Capacity-constrained assignment by forward auction. scores is row-major
// [t, n]; each expert takes at most capacity tokens, and capacity * n must
// cover t. The result's total score is within t * epsilon of the best
// capacity-feasible total.
std::vector<int64_t> auction_assign(const float* scores, int64_t t, int64_t n,
                                    int64_t capacity, double epsilon);

// Convenience form with capacity ceil(t/n) and epsilon = epsilon_scale times
// the score range.
std::vector<int64_t> auction_assign(const Tensor& scores, double epsilon_scale = 1e-3);

struct HashTable {
  std::vector<int64_t> table;  // token id -> expert
  int64_t num_experts = 0;
};

// Deals a seeded permutation of the vocabulary round-robin, so per-expert
// token-id loads differ by at most one.
HashTable build_hash_table(int64_t vocab_size, int64_t num_experts, uint64_t seed);

std::vector<int64_t> hash_assign(const HashTable& table, const std::vector<int64_t>& ids);

// Fraction of positions where the two assignments agree.
double routing_agreement(const std::vector<int64_t>& a, const std::vector<int64_t>& b);

}  // namespace moelab
