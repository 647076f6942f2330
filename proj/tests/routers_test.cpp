#include "moelab/routers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>

namespace moelab {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(RouterKindTest, RoundTripsThroughNames) {
  for (RouterKind kind : {RouterKind::StableMoe, RouterKind::StableMoeStage1,
                          RouterKind::Switch, RouterKind::Base, RouterKind::Hash,
                          RouterKind::Dense}) {
    EXPECT_EQ(router_kind_from_string(to_string(kind)), kind);
  }
  EXPECT_THROW(router_kind_from_string("banana"), ConfigError);
}

TEST(DistilledRouterTest, FeaturesAreWordRows) {
  Rng rng(71);
  DistilledRouter router(16, 4, 5, rng);
  Tensor f = router.features({3, 3, 9});
  auto words = router.word_table.values();
  for (int64_t c = 0; c < 5; ++c) {
    EXPECT_FLOAT_EQ(f.at(0, c), words[3 * 5 + c]);
    EXPECT_FLOAT_EQ(f.at(1, c), words[3 * 5 + c]);
    EXPECT_FLOAT_EQ(f.at(2, c), words[9 * 5 + c]);
  }
  EXPECT_EQ(router.scores({3, 9}).cols(), 4);
}

TEST(DistilledRouterTest, AssignIsTokenPureAndBreaksTiesLow) {
  Rng rng(72);
  DistilledRouter router(8, 3, 4, rng);
  // Same id must always land on the same expert, whatever its neighbors.
  auto a = router.assign({5, 1, 5});
  EXPECT_EQ(a[0], a[2]);
  auto b = router.assign({5});
  EXPECT_EQ(a[0], b[0]);
  EXPECT_THROW(router.assign({8}), IndexError);

  // Identical centroids score identically; the tie goes to expert 0.
  auto cents = router.centroids.values_mut();
  std::fill(cents.begin(), cents.end(), 0.25f);
  for (int64_t id = 0; id < 8; ++id) EXPECT_EQ(router.assign({id})[0], 0);
}

TEST(DistilledRouterTest, DistillationLossTrainsBothTables) {
  Rng rng(73);
  DistilledRouter router(12, 3, 4, rng);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = router.distillation_loss({1, 5, 7, 1}, {0, 2, 1, 0}, ops::Reduction::Sum);
  }
  EXPECT_EQ(tape.count_op("distillation_loss"), 1);
  tape.backward(loss);
  EXPECT_TRUE(router.word_table.has_grad());
  EXPECT_TRUE(router.centroids.has_grad());

  // Sum reduction is the mean times the token count.
  Tensor mean_loss = router.distillation_loss({1, 5, 7, 1}, {0, 2, 1, 0},
                                              ops::Reduction::Mean);
  EXPECT_NEAR(loss.item_f64(), 4.0 * mean_loss.item_f64(), 1e-9);
}

TEST(DistilledRouterTest, FreezeDetachesAndChecksums) {
  Rng rng(74);
  DistilledRouter router(10, 2, 3, rng);
  EXPECT_FALSE(router.is_frozen());
  EXPECT_THROW(router.verify_unchanged(), ContractError);

  router.freeze();
  EXPECT_TRUE(router.is_frozen());
  EXPECT_FALSE(router.word_table.requires_grad());
  EXPECT_FALSE(router.centroids.requires_grad());
  const uint64_t sum = router.frozen_checksum();
  router.freeze();  // idempotent
  EXPECT_EQ(router.frozen_checksum(), sum);
  EXPECT_NO_THROW(router.verify_unchanged());

  // Gradients no longer reach the tables.
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(router.scores({1, 2, 3}));
  }
  tape.backward(loss);
  EXPECT_FALSE(router.word_table.has_grad());
  EXPECT_FALSE(router.centroids.has_grad());

  router.word_table.values_mut()[0] += 1.0f;
  EXPECT_THROW(router.verify_unchanged(), IntegrityError);
}

TEST(DistilledRouterTest, ExportImportRoundTripsBitExactly) {
  Rng rng(75);
  DistilledRouter router(20, 4, 6, rng);
  const std::string path = temp_path("moelab_router_roundtrip.bin");
  EXPECT_THROW(router.export_file(path, 7), ContractError);  // not frozen yet
  router.freeze();
  router.export_file(path, 7);

  DistilledRouter loaded = DistilledRouter::import_file(path);
  EXPECT_TRUE(loaded.is_frozen());
  EXPECT_EQ(loaded.vocab_size(), 20);
  EXPECT_EQ(loaded.num_experts(), 4);
  EXPECT_EQ(loaded.feature_dim(), 6);
  EXPECT_EQ(loaded.checksum(), router.checksum());
  EXPECT_EQ(0, std::memcmp(loaded.word_table.values().data(),
                           router.word_table.values().data(), 20 * 6 * sizeof(float)));
  auto before = router.assign({0, 5, 19});
  auto after = loaded.assign({0, 5, 19});
  EXPECT_EQ(before, after);
  std::remove(path.c_str());
}

TEST(DistilledRouterTest, ImportRejectsTamperedFiles) {
  Rng rng(76);
  DistilledRouter router(8, 2, 3, rng);
  router.freeze();
  const std::string path = temp_path("moelab_router_tampered.bin");
  router.export_file(path, 1);

  // Flip one byte in the last blob.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    char c;
    f.seekg(-1, std::ios::end);
    f.get(c);
    f.seekp(-1, std::ios::end);
    c = static_cast<char>(c ^ 0x40);
    f.put(c);
  }
  EXPECT_THROW(DistilledRouter::import_file(path), IntegrityError);

  // Wrong magic.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("NOPE", 4);
  }
  EXPECT_THROW(DistilledRouter::import_file(path), IntegrityError);
  std::remove(path.c_str());
  EXPECT_THROW(DistilledRouter::import_file(path), IoError);
}

double best_feasible_total(const std::vector<float>& s, int64_t t, int64_t n, int64_t cap) {
  std::vector<int64_t> counts(static_cast<size_t>(n), 0);
  double best = -std::numeric_limits<double>::infinity();
  std::function<void(int64_t, double)> rec = [&](int64_t tok, double acc) {
    if (tok == t) {
      best = std::max(best, acc);
      return;
    }
    for (int64_t e = 0; e < n; ++e) {
      if (counts[static_cast<size_t>(e)] == cap) continue;
      ++counts[static_cast<size_t>(e)];
      rec(tok + 1, acc + static_cast<double>(s[static_cast<size_t>(tok * n + e)]));
      --counts[static_cast<size_t>(e)];
    }
  };
  rec(0, 0.0);
  return best;
}

TEST(AuctionTest, MatchesWorkedExample) {
  std::vector<float> s = {3.0f, 1.0f, 2.0f, 1.0f};
  auto a = auction_assign(s.data(), 2, 2, 1, 1e-3);
  EXPECT_EQ(a, (std::vector<int64_t>{0, 1}));
}

TEST(AuctionTest, ChecksItsContract) {
  std::vector<float> s = {1.0f, 2.0f, 3.0f, 4.0f};
  EXPECT_THROW(auction_assign(s.data(), 4, 1, 3, 1e-3), ContractError);  // capacity short
  EXPECT_THROW(auction_assign(s.data(), 2, 2, 1, 0.0), ContractError);   // epsilon
  std::vector<float> bad = {1.0f, std::numeric_limits<float>::quiet_NaN()};
  EXPECT_THROW(auction_assign(bad.data(), 1, 2, 1, 1e-3), ContractError);
}

TEST(AuctionTest, SingleExpertTakesEverything) {
  std::vector<float> s = {0.5f, -0.25f, 1.5f};
  auto a = auction_assign(s.data(), 3, 1, 3, 1e-3);
  EXPECT_EQ(a, (std::vector<int64_t>{0, 0, 0}));
}

TEST(AuctionTest, NearOptimalOnRandomInstances) {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const int64_t t = 1 + rng.below(8);
    const int64_t n = 1 + rng.below(4);
    const int64_t cap = (t + n - 1) / n + rng.below(2);
    std::vector<float> s(static_cast<size_t>(t * n));
    float lo = std::numeric_limits<float>::max(), hi = std::numeric_limits<float>::lowest();
    for (auto& x : s) {
      x = static_cast<float>(rng.normal() * 2.0);
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    const double eps = 1e-3 * std::max(1e-6, static_cast<double>(hi) - lo);
    auto a = auction_assign(s.data(), t, n, cap, eps);

    std::vector<int64_t> counts(static_cast<size_t>(n), 0);
    double total = 0.0;
    for (int64_t tok = 0; tok < t; ++tok) {
      ASSERT_GE(a[static_cast<size_t>(tok)], 0);
      ASSERT_LT(a[static_cast<size_t>(tok)], n);
      ++counts[static_cast<size_t>(a[static_cast<size_t>(tok)])];
      total += static_cast<double>(s[static_cast<size_t>(tok * n + a[static_cast<size_t>(tok)])]);
    }
    for (int64_t e = 0; e < n; ++e) ASSERT_LE(counts[static_cast<size_t>(e)], cap);
    const double best = best_feasible_total(s, t, n, cap);
    ASSERT_GE(total, best - static_cast<double>(t) * eps - 1e-9)
        << "trial " << trial << " t=" << t << " n=" << n << " cap=" << cap;
  }
}

TEST(AuctionTest, TensorFormUsesDefaultCapacity) {
  Rng rng(78);
  Tensor scores = Tensor::randn({10, 3}, rng, 1.0f);
  auto a = auction_assign(scores);
  std::vector<int64_t> counts(3, 0);
  for (int64_t e : a) ++counts[static_cast<size_t>(e)];
  for (int64_t c : counts) EXPECT_LE(c, 4);  // ceil(10/3)
}

TEST(HashTableTest, DealsBalancedDeterministicTables) {
  HashTable t1 = build_hash_table(256, 8, 13);
  HashTable t2 = build_hash_table(256, 8, 13);
  EXPECT_EQ(t1.table, t2.table);

  std::vector<int64_t> counts(8, 0);
  for (int64_t e : t1.table) ++counts[static_cast<size_t>(e)];
  for (int64_t c : counts) EXPECT_EQ(c, 32);

  // Uneven split: loads differ by at most one.
  HashTable t3 = build_hash_table(10, 3, 5);
  std::vector<int64_t> c3(3, 0);
  for (int64_t e : t3.table) ++c3[static_cast<size_t>(e)];
  for (int64_t c : c3) EXPECT_TRUE(c == 3 || c == 4);

  HashTable t4 = build_hash_table(256, 8, 14);
  EXPECT_NE(t1.table, t4.table);
}

TEST(HashTableTest, AssignLooksUpByTokenId) {
  // A modulo table pins the expected semantics: id 5 with 4 experts -> 1.
  HashTable table;
  table.num_experts = 4;
  table.table.resize(16);
  for (int64_t i = 0; i < 16; ++i) table.table[static_cast<size_t>(i)] = i % 4;
  EXPECT_EQ(hash_assign(table, {5})[0], 1);
  EXPECT_EQ(hash_assign(table, {5, 9, 13})[0], hash_assign(table, {5})[0]);
  EXPECT_THROW(hash_assign(table, {16}), IndexError);
}

TEST(RoutingAgreementTest, CountsMatchingPositions) {
  EXPECT_DOUBLE_EQ(routing_agreement({1, 2, 3, 4}, {1, 2, 0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(routing_agreement({1}, {1}), 1.0);
  EXPECT_THROW(routing_agreement({}, {}), ContractError);
  EXPECT_THROW(routing_agreement({1, 2}, {1}), ContractError);
}

}  // namespace
}  // namespace moelab
