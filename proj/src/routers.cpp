#include "moelab/routers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "moelab/hash.hpp"

static_assert(std::endian::native == std::endian::little,
              "router export assumes a little-endian host");

namespace moelab {

std::string to_string(RouterKind kind) {
  switch (kind) {
    case RouterKind::StableMoe: return "stablemoe";
    case RouterKind::StableMoeStage1: return "stablemoe-stage1";
    case RouterKind::Switch: return "switch";
    case RouterKind::Base: return "base";
    case RouterKind::Hash: return "hash";
    case RouterKind::Dense: return "dense";
  }
  return "unknown";
}

RouterKind router_kind_from_string(const std::string& name) {
  if (name == "stablemoe") return RouterKind::StableMoe;
  if (name == "stablemoe-stage1") return RouterKind::StableMoeStage1;
  if (name == "switch") return RouterKind::Switch;
  if (name == "base") return RouterKind::Base;
  if (name == "hash") return RouterKind::Hash;
  if (name == "dense") return RouterKind::Dense;
  throw ConfigError("unknown router kind '" + name + "'");
}

DistilledRouter::DistilledRouter(int64_t vocab_size, int64_t num_experts,
                                 int64_t feature_dim, Rng& rng) {
  if (vocab_size < 1 || num_experts < 1 || feature_dim < 1) {
    throw ConfigError("router dimensions must be positive");
  }
  word_table = Tensor::randn({vocab_size, feature_dim}, rng, 0.02f, true);
  centroids = Tensor::randn({num_experts, feature_dim}, rng, 0.02f, true);
}

Tensor DistilledRouter::features(const std::vector<int64_t>& ids) const {
  return ops::embedding(word_table, ids);
}

Tensor DistilledRouter::scores(const std::vector<int64_t>& ids) const {
  return ops::matmul_t(features(ids), centroids);
}

Tensor DistilledRouter::distillation_loss(const std::vector<int64_t>& ids,
                                          const std::vector<int64_t>& teacher,
                                          ops::Reduction reduction) const {
  return ops::cross_entropy(scores(ids), teacher, reduction, "distillation_loss");
}

std::vector<int64_t> DistilledRouter::assign(const std::vector<int64_t>& ids) const {
  const int64_t v = vocab_size(), n = num_experts(), fd = feature_dim();
  auto words = word_table.values();
  auto cents = centroids.values();
  std::vector<int64_t> out(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    const int64_t id = ids[i];
    if (id < 0 || id >= v) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(v));
    }
    const float* feat = words.data() + id * fd;
    int64_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) {
      const float* c = cents.data() + j * fd;
      double dot = 0.0;
      for (int64_t k = 0; k < fd; ++k) dot += static_cast<double>(feat[k]) * c[k];
      if (dot > best_score) {
        best_score = dot;
        best = j;
      }
    }
    out[i] = best;
  }
  return out;
}

void DistilledRouter::freeze() {
  if (frozen_) return;
  word_table.set_requires_grad(false);
  centroids.set_requires_grad(false);
  word_table.drop_grad();
  centroids.drop_grad();
  frozen_ = true;
  frozen_sum_ = checksum();
}

uint64_t DistilledRouter::checksum() const {
  auto words = word_table.values();
  auto cents = centroids.values();
  uint64_t h = fnv1a64(words.data(), words.size() * sizeof(float));
  return fnv1a64(cents.data(), cents.size() * sizeof(float), h);
}

void DistilledRouter::verify_unchanged() const {
  if (!frozen_) throw ContractError("verify_unchanged on a router that is not frozen");
  if (checksum() != frozen_sum_) {
    throw IntegrityError("frozen router parameters changed after freezing");
  }
}

namespace {
constexpr char kRouterMagic[4] = {'M', 'O', 'E', 'R'};
constexpr uint32_t kRouterVersion = 1;
}  // namespace

void DistilledRouter::export_file(const std::string& path, uint64_t seed) const {
  if (!frozen_) throw ContractError("only a frozen router can be exported");
  auto words = word_table.values();
  auto cents = centroids.values();
  nlohmann::json manifest = {
      {"version", kRouterVersion},
      {"vocab_size", vocab_size()},
      {"num_experts", num_experts()},
      {"feature_dim", feature_dim()},
      {"seed", seed},
      {"word_blob_bytes", words.size() * sizeof(float)},
      {"word_checksum", hex64(fnv1a64(words.data(), words.size() * sizeof(float)))},
      {"centroid_blob_bytes", cents.size() * sizeof(float)},
      {"centroid_checksum", hex64(fnv1a64(cents.data(), cents.size() * sizeof(float)))},
  };
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(kRouterMagic, 4);
  const uint32_t version = kRouterVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint32_t len = static_cast<uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(cents.data()),
            static_cast<std::streamsize>(cents.size() * sizeof(float)));
  if (!out) throw IoError("failed writing " + path);
}

DistilledRouter DistilledRouter::import_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  uint32_t version = 0, len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kRouterMagic, 4) != 0) {
    throw IntegrityError("not a router export: " + path);
  }
  if (version != kRouterVersion) {
    throw IntegrityError("unsupported router export version " + std::to_string(version));
  }
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw IntegrityError("truncated router manifest in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("bad router manifest: ") + e.what());
  }
  const int64_t v = manifest.at("vocab_size").get<int64_t>();
  const int64_t n = manifest.at("num_experts").get<int64_t>();
  const int64_t fd = manifest.at("feature_dim").get<int64_t>();
  const size_t word_bytes = manifest.at("word_blob_bytes").get<size_t>();
  const size_t cent_bytes = manifest.at("centroid_blob_bytes").get<size_t>();
  if (v < 1 || n < 1 || fd < 1 || word_bytes != static_cast<size_t>(v * fd) * sizeof(float) ||
      cent_bytes != static_cast<size_t>(n * fd) * sizeof(float)) {
    throw IntegrityError("inconsistent router manifest in " + path);
  }
  std::vector<float> words(static_cast<size_t>(v * fd));
  std::vector<float> cents(static_cast<size_t>(n * fd));
  in.read(reinterpret_cast<char*>(words.data()),
          static_cast<std::streamsize>(word_bytes));
  in.read(reinterpret_cast<char*>(cents.data()),
          static_cast<std::streamsize>(cent_bytes));
  if (!in) throw IntegrityError("truncated router blobs in " + path);
  if (hex64(fnv1a64(words.data(), word_bytes)) != manifest.at("word_checksum") ||
      hex64(fnv1a64(cents.data(), cent_bytes)) != manifest.at("centroid_checksum")) {
    throw IntegrityError("router blob checksum mismatch in " + path);
  }
  DistilledRouter router;
  router.word_table = Tensor::from({v, fd}, std::move(words));
  router.centroids = Tensor::from({n, fd}, std::move(cents));
  router.frozen_ = true;
  router.frozen_sum_ = router.checksum();
  return router;
}

void DistilledRouter::register_params(ParamList& params, const std::string& prefix) const {
  params.emplace_back(prefix + ".word_table", word_table);
  params.emplace_back(prefix + ".centroids", centroids);
}

namespace {

// Forward auction: starts from an empty assignment with the given entry
// prices, ends with every token placed under epsilon-complementary slackness.
void auction_phase(const float* s, int64_t t, int64_t n, int64_t capacity, double eps,
                   std::vector<double>& base_price, std::vector<int64_t>& owner) {
  struct Bid {
    double price;
    int64_t token;
    bool operator>(const Bid& other) const { return price > other.price; }
  };
  std::vector<std::vector<Bid>> holders(static_cast<size_t>(n));
  for (auto& h : holders) h.reserve(static_cast<size_t>(capacity) + 1);
  std::deque<int64_t> pending;
  for (int64_t r = 0; r < t; ++r) pending.push_back(r);

  auto entry = [&](int64_t i) {
    const auto& h = holders[static_cast<size_t>(i)];
    return static_cast<int64_t>(h.size()) >= capacity ? h.front().price
                                                      : base_price[static_cast<size_t>(i)];
  };

  while (!pending.empty()) {
    const int64_t tok = pending.front();
    pending.pop_front();
    int64_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    double second_v = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < n; ++i) {
      const double v = static_cast<double>(s[tok * n + i]) - entry(i);
      if (v > best_v) {
        second_v = best_v;
        best_v = v;
        best = i;
      } else if (v > second_v) {
        second_v = v;
      }
    }
    if (n == 1) second_v = best_v;
    const double bid = static_cast<double>(s[tok * n + best]) - second_v + eps;
    auto& heap = holders[static_cast<size_t>(best)];
    heap.push_back({bid, tok});
    std::push_heap(heap.begin(), heap.end(), std::greater<>());
    if (static_cast<int64_t>(heap.size()) > capacity) {
      std::pop_heap(heap.begin(), heap.end(), std::greater<>());
      pending.push_back(heap.back().token);
      heap.pop_back();
    }
  }
  for (int64_t i = 0; i < n; ++i) {
    base_price[static_cast<size_t>(i)] = entry(i);
    for (const Bid& b : holders[static_cast<size_t>(i)]) owner[static_cast<size_t>(b.token)] = i;
  }
}

}  // namespace

std::vector<int64_t> auction_assign(const float* scores, int64_t t, int64_t n,
                                    int64_t capacity, double epsilon) {
  if (t < 1 || n < 1) throw ContractError("auction_assign needs tokens and experts");
  if (capacity < 1 || capacity * n < t) {
    throw ContractError("auction capacity " + std::to_string(capacity) + " x " +
                        std::to_string(n) + " experts cannot hold " + std::to_string(t) +
                        " tokens");
  }
  if (!(epsilon > 0.0)) throw ContractError("auction epsilon must be positive");
  for (int64_t i = 0; i < t * n; ++i) {
    if (!std::isfinite(scores[i])) throw ContractError("auction scores must be finite");
  }
  // A single phase from zero prices keeps the classical bound: experts left
  // under capacity end at price zero, so no feasible assignment carries more
  // price mass than the one found.
  std::vector<int64_t> owner(static_cast<size_t>(t), 0);
  std::vector<double> price(static_cast<size_t>(n), 0.0);
  auction_phase(scores, t, n, capacity, epsilon, price, owner);
  return owner;
}

std::vector<int64_t> auction_assign(const Tensor& scores, double epsilon_scale) {
  const int64_t t = scores.rows(), n = scores.cols();
  auto sv = scores.values();
  float lo = sv[0], hi = sv[0];
  for (float x : sv) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  const double eps = epsilon_scale * std::max(range, 1e-6);
  const int64_t capacity = (t + n - 1) / n;
  return auction_assign(sv.data(), t, n, capacity, eps);
}

HashTable build_hash_table(int64_t vocab_size, int64_t num_experts, uint64_t seed) {
  if (vocab_size < 1 || num_experts < 1) {
    throw ContractError("hash table needs a vocabulary and experts");
  }
  std::vector<int64_t> perm(static_cast<size_t>(vocab_size));
  for (int64_t i = 0; i < vocab_size; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  for (int64_t i = vocab_size - 1; i > 0; --i) {
    const int64_t j = rng.below(i + 1);
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  HashTable table;
  table.num_experts = num_experts;
  table.table.assign(static_cast<size_t>(vocab_size), 0);
  for (int64_t slot = 0; slot < vocab_size; ++slot) {
    table.table[static_cast<size_t>(perm[static_cast<size_t>(slot)])] = slot % num_experts;
  }
  return table;
}

std::vector<int64_t> hash_assign(const HashTable& table, const std::vector<int64_t>& ids) {
  std::vector<int64_t> out(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    const int64_t id = ids[i];
    if (id < 0 || id >= static_cast<int64_t>(table.table.size())) {
      throw IndexError("token id " + std::to_string(id) + " outside hash table of " +
                       std::to_string(table.table.size()));
    }
    out[i] = table.table[static_cast<size_t>(id)];
  }
  return out;
}

double routing_agreement(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  if (a.empty() || a.size() != b.size()) {
    throw ContractError("routing_agreement wants two equal nonempty assignments");
  }
  size_t same = 0;
  for (size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace moelab
