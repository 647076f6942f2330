#include "moelab/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "moelab/gradcheck.hpp"
#include "moelab/rng.hpp"

namespace {

using namespace moelab;
using ops::Reduction;

// Scalar loss with non-uniform upstream gradients: sum(out * fixed_weights).
Tensor weighted_sum(const Tensor& out, Rng& rng) {
  Tensor w = Tensor::randn(out.shape(), rng, 1.0f);
  return ops::sum(ops::mul(out, w));
}

void expect_grads_match(const std::function<Tensor()>& loss,
                        const std::vector<Tensor>& params, double step = 1e-2) {
  auto report = grad_check(loss, params, step);
  EXPECT_LT(report.max_rel_err, 1e-4) << report.worst;
}

TEST(OpsForward, MatmulHandValues) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = ops::matmul(a, b);
  EXPECT_FLOAT_EQ(c.at(0, 0), 19.0f);
  EXPECT_FLOAT_EQ(c.at(0, 1), 22.0f);
  EXPECT_FLOAT_EQ(c.at(1, 0), 43.0f);
  EXPECT_FLOAT_EQ(c.at(1, 1), 50.0f);
  EXPECT_THROW(ops::matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST(OpsForward, MatmulTMatchesExplicitTranspose) {
  Rng rng(3);
  Tensor a = Tensor::randn({4, 5}, rng, 1.0f);
  Tensor b = Tensor::randn({3, 5}, rng, 1.0f);
  Tensor c = ops::matmul_t(a, b);
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t j = 0; j < 3; ++j) {
      double want = 0.0;
      for (int64_t p = 0; p < 5; ++p) {
        want += static_cast<double>(a.at(i, p)) * b.at(j, p);
      }
      EXPECT_NEAR(c.at(i, j), want, 1e-5);
    }
  }
}

TEST(OpsForward, SigmoidValues) {
  Tensor x = Tensor::from({3}, {0.0f, 30.0f, -30.0f});
  Tensor y = ops::sigmoid(x);
  EXPECT_FLOAT_EQ(y.values()[0], 0.5f);
  EXPECT_NEAR(y.values()[1], 1.0f, 1e-9);
  EXPECT_NEAR(y.values()[2], 0.0f, 1e-9);
  EXPECT_TRUE(std::isfinite(y.values()[1]) && std::isfinite(y.values()[2]));
}

TEST(OpsForward, GeluValues) {
  Tensor x = Tensor::from({3}, {0.0f, 1.0f, -3.0f});
  Tensor y = ops::gelu(x);
  EXPECT_FLOAT_EQ(y.values()[0], 0.0f);
  EXPECT_NEAR(y.values()[1], 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-6);
  EXPECT_NEAR(y.values()[2], -3.0 * 0.5 * (1.0 + std::erf(-3.0 / std::sqrt(2.0))), 1e-6);
}

TEST(OpsForward, RowSoftmaxRowsSumToOne) {
  Rng rng(5);
  Tensor x = Tensor::randn({4, 6}, rng, 2.0f);
  Tensor p = ops::row_softmax(x);
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < 6; ++j) {
      EXPECT_GT(p.at(r, j), 0.0f);
      s += p.at(r, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(OpsForward, RowSoftmaxShiftInvariant) {
  Tensor x = Tensor::from({1, 3}, {1.0f, 2.0f, 3.0f});
  Tensor shifted = Tensor::from({1, 3}, {101.0f, 102.0f, 103.0f});
  Tensor p = ops::row_softmax(x);
  Tensor q = ops::row_softmax(shifted);
  for (int64_t j = 0; j < 3; ++j) EXPECT_NEAR(p.at(0, j), q.at(0, j), 1e-6);
}

TEST(OpsForward, LayerNormNormalizesRows) {
  Tensor x = Tensor::from({2, 4}, {1, 2, 3, 4, -10, 0, 10, 20});
  Tensor gamma = Tensor::full({4}, 1.0f);
  Tensor beta = Tensor::zeros({4});
  Tensor y = ops::layer_norm(x, gamma, beta);
  for (int64_t r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (int64_t j = 0; j < 4; ++j) mu += y.at(r, j);
    mu /= 4;
    for (int64_t j = 0; j < 4; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu);
    var /= 4;
    EXPECT_NEAR(mu, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);  // eps shrinks it slightly
  }
}

TEST(OpsForward, EmbeddingPicksRows) {
  Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  Tensor out = ops::embedding(table, {2, 0, 2});
  EXPECT_FLOAT_EQ(out.at(0, 0), 20.0f);
  EXPECT_FLOAT_EQ(out.at(1, 1), 1.0f);
  EXPECT_FLOAT_EQ(out.at(2, 1), 21.0f);
  EXPECT_THROW(ops::embedding(table, {3}), IndexError);
  EXPECT_THROW(ops::embedding(table, {-1}), IndexError);
}

TEST(OpsForward, GatherAssembleRoundTrip) {
  Rng rng(8);
  Tensor x = Tensor::randn({5, 3}, rng, 1.0f);
  std::vector<int64_t> first = {0, 2, 4};
  std::vector<int64_t> second = {1, 3};
  Tensor a = ops::gather_rows(x, first);
  Tensor b = ops::gather_rows(x, second);
  Tensor back = ops::assemble_rows(5, {a, b}, {first, second});
  EXPECT_EQ(0, std::memcmp(back.values().data(), x.values().data(), sizeof(float) * 15));
}

TEST(OpsForward, AssembleRejectsBadCoverage) {
  Tensor part = Tensor::zeros({2, 3});
  EXPECT_THROW(ops::assemble_rows(3, {part}, {{0, 1}}), ContractError);      // row 2 missing
  EXPECT_THROW(ops::assemble_rows(2, {part}, {{0, 0}}), ContractError);      // row 0 twice
  EXPECT_THROW(ops::assemble_rows(2, {part}, {{0, 5}}), IndexError);         // out of range
  EXPECT_THROW(ops::assemble_rows(2, {part}, {{0}}), ContractError);         // count mismatch
}

TEST(OpsForward, GatherColsPicksPerRow) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor out = ops::gather_cols(x, {2, 0});
  EXPECT_FLOAT_EQ(out.values()[0], 3.0f);
  EXPECT_FLOAT_EQ(out.values()[1], 4.0f);
  EXPECT_THROW(ops::gather_cols(x, {0}), DimensionError);
  EXPECT_THROW(ops::gather_cols(x, {0, 3}), IndexError);
}

TEST(OpsForward, ScaleRowsMultipliesPerRow) {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor f = Tensor::from({2}, {10, -1});
  Tensor out = ops::scale_rows(x, f);
  EXPECT_FLOAT_EQ(out.at(0, 1), 20.0f);
  EXPECT_FLOAT_EQ(out.at(1, 0), -3.0f);
}

TEST(OpsForward, AttentionFirstRowCopiesFirstValue) {
  Rng rng(11);
  Tensor q = Tensor::randn({5, 6}, rng, 1.0f);
  Tensor k = Tensor::randn({5, 6}, rng, 1.0f);
  Tensor v = Tensor::randn({5, 6}, rng, 1.0f);
  Tensor out = ops::causal_self_attention(q, k, v, 2, q.rows());
  // Position 0 can only attend to itself, in every head.
  for (int64_t c = 0; c < 6; ++c) EXPECT_NEAR(out.at(0, c), v.at(0, c), 1e-6);
}

TEST(OpsForward, AttentionUniformWhenQueriesVanish) {
  Rng rng(12);
  Tensor q = Tensor::zeros({4, 4});
  Tensor k = Tensor::randn({4, 4}, rng, 1.0f);
  Tensor v = Tensor::randn({4, 4}, rng, 1.0f);
  Tensor out = ops::causal_self_attention(q, k, v, 1, q.rows());
  // Zero queries give equal scores, so row i averages v[0..i].
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t c = 0; c < 4; ++c) {
      double want = 0.0;
      for (int64_t j = 0; j <= i; ++j) want += v.at(j, c);
      want /= (i + 1);
      EXPECT_NEAR(out.at(i, c), want, 1e-5);
    }
  }
}

TEST(OpsForward, AttentionIsCausal) {
  Rng rng(13);
  Tensor q = Tensor::randn({6, 4}, rng, 1.0f);
  Tensor k = Tensor::randn({6, 4}, rng, 1.0f);
  Tensor v = Tensor::randn({6, 4}, rng, 1.0f);
  Tensor base = ops::causal_self_attention(q, k, v, 2, q.rows());

  // Perturbing position 3 of the keys and values leaves rows 0..2 untouched.
  Tensor k2 = k.clone();
  Tensor v2 = v.clone();
  for (int64_t c = 0; c < 4; ++c) {
    k2.values_mut()[3 * 4 + c] += 5.0f;
    v2.values_mut()[3 * 4 + c] -= 7.0f;
  }
  Tensor moved = ops::causal_self_attention(q, k2, v2, 2, q.rows());
  EXPECT_EQ(0, std::memcmp(moved.values().data(), base.values().data(), sizeof(float) * 3 * 4));
  // ...and does change some later row.
  EXPECT_NE(0, std::memcmp(moved.values().data() + 3 * 4, base.values().data() + 3 * 4,
                           sizeof(float) * 3 * 4));
}

TEST(OpsForward, AttentionKeepsSequencesIndependent) {
  Rng rng(14);
  Tensor q = Tensor::randn({10, 4}, rng, 1.0f);
  Tensor k = Tensor::randn({10, 4}, rng, 1.0f);
  Tensor v = Tensor::randn({10, 4}, rng, 1.0f);
  // Two stacked sequences of five rows behave like two separate calls.
  Tensor both = ops::causal_self_attention(q, k, v, 2, 5);
  auto half = [&](const Tensor& x, int64_t start) {
    Tensor h = Tensor::zeros({5, 4});
    std::memcpy(h.values_mut().data(), x.values().data() + start * 4, sizeof(float) * 5 * 4);
    return h;
  };
  Tensor first = ops::causal_self_attention(half(q, 0), half(k, 0), half(v, 0), 2, 5);
  Tensor second = ops::causal_self_attention(half(q, 5), half(k, 5), half(v, 5), 2, 5);
  EXPECT_EQ(0, std::memcmp(both.values().data(), first.values().data(), sizeof(float) * 5 * 4));
  EXPECT_EQ(0, std::memcmp(both.values().data() + 5 * 4, second.values().data(),
                           sizeof(float) * 5 * 4));
  EXPECT_THROW(ops::causal_self_attention(q, k, v, 2, 4), DimensionError);
}

TEST(OpsForward, CrossEntropyUniformLogits) {
  const int64_t t = 4, v = 8;
  Tensor logits = Tensor::zeros({t, v});
  Tensor loss_mean = ops::cross_entropy(logits, {0, 1, 2, 3}, Reduction::Mean);
  Tensor loss_sum = ops::cross_entropy(logits, {0, 1, 2, 3}, Reduction::Sum);
  EXPECT_NEAR(loss_mean.item_f64(), std::log(8.0), 1e-9);
  EXPECT_NEAR(loss_sum.item_f64(), 4.0 * std::log(8.0), 1e-9);
}

TEST(OpsForward, CrossEntropyConfidentPrediction) {
  Tensor logits = Tensor::from({1, 3}, {50.0f, 0.0f, 0.0f});
  Tensor loss = ops::cross_entropy(logits, {0}, Reduction::Mean);
  EXPECT_NEAR(loss.item_f64(), 0.0, 1e-9);
  EXPECT_THROW(ops::cross_entropy(logits, {3}, Reduction::Mean), IndexError);
  EXPECT_THROW(ops::cross_entropy(logits, {0, 1}, Reduction::Mean), DimensionError);
}

TEST(OpsForward, CrossEntropyShiftInvariant) {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, -1, 0, 1});
  Tensor b = Tensor::from({2, 3}, {201, 202, 203, 199, 200, 201});
  double la = ops::cross_entropy(a, {2, 0}, Reduction::Sum).item_f64();
  double lb = ops::cross_entropy(b, {2, 0}, Reduction::Sum).item_f64();
  EXPECT_NEAR(la, lb, 1e-5);
}

TEST(OpsForward, BalanceLossWorkedInstance) {
  // Two experts, four tokens split 3/1, all scores zero. The sigmoids are
  // all 0.5, the even share is 2, so the penalty is
  // 0.3 * ((3-2)/2 * 1.5 + (1-2)/2 * 0.5) = 0.15.
  Tensor scores = Tensor::zeros({4, 2});
  Tensor loss = ops::balance_loss(scores, {0, 0, 0, 1}, 0.3);
  EXPECT_NEAR(loss.item_f64(), 0.15, 1e-12);
}

TEST(OpsForward, BalanceLossZeroWhenBalanced) {
  Rng rng(17);
  Tensor scores = Tensor::randn({6, 3}, rng, 1.0f);
  Tensor loss = ops::balance_loss(scores, {0, 1, 2, 0, 1, 2}, 0.3);
  EXPECT_DOUBLE_EQ(loss.item_f64(), 0.0);
}

TEST(OpsForward, BalanceLossGradientPushesLoadTowardEven) {
  Rng rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t t = 12, n = 1 + rng.below(4);
    Tensor scores = Tensor::randn({t, n}, rng, 2.0f, /*requires_grad=*/true);
    std::vector<int64_t> assignment(t);
    std::vector<int64_t> counts(n, 0);
    for (auto& a : assignment) {
      a = rng.below(n);
      ++counts[a];
    }
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = ops::balance_loss(scores, assignment, 0.3);
    }
    tape.backward(loss);
    const double share = static_cast<double>(t) / static_cast<double>(n);
    for (int64_t r = 0; r < t; ++r) {
      for (int64_t j = 0; j < n; ++j) {
        float g = scores.grad()[r * n + j];
        if (j != assignment[r]) {
          EXPECT_EQ(g, 0.0f);
        } else if (counts[j] > share) {
          EXPECT_GT(g, 0.0f);  // overloaded: raising the score raises the penalty
        } else if (counts[j] < share) {
          EXPECT_LT(g, 0.0f);
        } else {
          EXPECT_EQ(g, 0.0f);
        }
      }
    }
  }
}

TEST(OpsGrad, Matmul) {
  Rng rng(21);
  Tensor a = Tensor::randn({4, 5}, rng, 1.0f, true);
  Tensor b = Tensor::randn({5, 3}, rng, 1.0f, true);
  expect_grads_match([&] { return weighted_sum(ops::matmul(a, b), rng); }, {a, b});
}

TEST(OpsGrad, MatmulT) {
  Rng rng(22);
  Tensor a = Tensor::randn({4, 5}, rng, 1.0f, true);
  Tensor b = Tensor::randn({3, 5}, rng, 1.0f, true);
  expect_grads_match([&] { return weighted_sum(ops::matmul_t(a, b), rng); }, {a, b});
}

TEST(OpsGrad, AddMulScale) {
  Rng rng(23);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0f, true);
  Tensor b = Tensor::randn({3, 4}, rng, 1.0f, true);
  expect_grads_match(
      [&] { return weighted_sum(ops::scale(ops::mul(ops::add(a, b), b), -1.7f), rng); },
      {a, b});
}

TEST(OpsGrad, AddBias) {
  Rng rng(24);
  Tensor x = Tensor::randn({4, 3}, rng, 1.0f, true);
  Tensor bias = Tensor::randn({3}, rng, 1.0f, true);
  expect_grads_match([&] { return weighted_sum(ops::add_bias(x, bias), rng); }, {x, bias});
}

TEST(OpsGrad, SumAndMean) {
  Rng rng(25);
  Tensor x = Tensor::randn({3, 5}, rng, 1.0f, true);
  expect_grads_match([&] { return ops::sum(x); }, {x});
  expect_grads_match([&] { return ops::mean(x); }, {x});
}

TEST(OpsGrad, Sigmoid) {
  Rng rng(26);
  Tensor x = Tensor::randn({3, 4}, rng, 1.5f, true);
  expect_grads_match([&] { return weighted_sum(ops::sigmoid(x), rng); }, {x});
}

TEST(OpsGrad, Gelu) {
  Rng rng(27);
  Tensor x = Tensor::randn({3, 4}, rng, 1.5f, true);
  expect_grads_match([&] { return weighted_sum(ops::gelu(x), rng); }, {x});
}

TEST(OpsGrad, RowSoftmax) {
  Rng rng(28);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0f, true);
  expect_grads_match([&] { return weighted_sum(ops::row_softmax(x), rng); }, {x});
}

TEST(OpsGrad, LayerNorm) {
  Rng rng(29);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0f, true);
  Tensor gamma = Tensor::randn({6}, rng, 0.5f, true);
  Tensor beta = Tensor::randn({6}, rng, 0.5f, true);
  expect_grads_match([&] { return weighted_sum(ops::layer_norm(x, gamma, beta), rng); },
                     {x, gamma, beta});
}

TEST(OpsGrad, EmbeddingScatterAddsRepeats) {
  Rng rng(30);
  Tensor table = Tensor::randn({7, 5}, rng, 1.0f, true);
  std::vector<int64_t> ids = {0, 3, 3, 6, 1};
  expect_grads_match([&] { return weighted_sum(ops::embedding(table, ids), rng); }, {table});
}

TEST(OpsGrad, GatherRows) {
  Rng rng(31);
  Tensor x = Tensor::randn({6, 4}, rng, 1.0f, true);
  std::vector<int64_t> rows = {5, 0, 3, 3};
  expect_grads_match([&] { return weighted_sum(ops::gather_rows(x, rows), rng); }, {x});
}

TEST(OpsGrad, AssembleRows) {
  Rng rng(32);
  Tensor x = Tensor::randn({5, 4}, rng, 1.0f, true);
  std::vector<int64_t> first = {0, 2, 4};
  std::vector<int64_t> second = {1, 3};
  expect_grads_match(
      [&] {
        Tensor a = ops::gelu(ops::gather_rows(x, first));
        Tensor b = ops::sigmoid(ops::gather_rows(x, second));
        return weighted_sum(ops::assemble_rows(5, {a, b}, {first, second}), rng);
      },
      {x});
}

TEST(OpsGrad, GatherCols) {
  Rng rng(33);
  Tensor x = Tensor::randn({5, 4}, rng, 1.0f, true);
  std::vector<int64_t> cols = {3, 0, 2, 2, 1};
  expect_grads_match([&] { return weighted_sum(ops::gather_cols(x, cols), rng); }, {x});
}

TEST(OpsGrad, ScaleRows) {
  Rng rng(34);
  Tensor x = Tensor::randn({4, 5}, rng, 1.0f, true);
  Tensor f = Tensor::randn({4}, rng, 1.0f, true);
  expect_grads_match([&] { return weighted_sum(ops::scale_rows(x, f), rng); }, {x, f});
}

TEST(OpsGrad, CausalSelfAttention) {
  Rng rng(35);
  Tensor q = Tensor::randn({6, 4}, rng, 1.0f, true);
  Tensor k = Tensor::randn({6, 4}, rng, 1.0f, true);
  Tensor v = Tensor::randn({6, 4}, rng, 1.0f, true);
  expect_grads_match(
      [&] { return weighted_sum(ops::causal_self_attention(q, k, v, 2, q.rows()), rng); }, {q, k, v});
}

TEST(OpsGrad, CrossEntropyBothReductions) {
  Rng rng(36);
  Tensor logits = Tensor::randn({5, 7}, rng, 1.0f, true);
  std::vector<int64_t> targets = {3, 0, 6, 2, 2};
  expect_grads_match([&] { return ops::cross_entropy(logits, targets, Reduction::Mean); },
                     {logits});
  expect_grads_match([&] { return ops::cross_entropy(logits, targets, Reduction::Sum); },
                     {logits});
}

TEST(OpsGrad, BalanceLoss) {
  Rng rng(37);
  Tensor scores = Tensor::randn({8, 3}, rng, 1.0f, true);
  std::vector<int64_t> assignment = {0, 0, 0, 0, 1, 1, 2, 0};
  expect_grads_match([&] { return ops::balance_loss(scores, assignment, 0.3); }, {scores});
}

TEST(OpsGrad, BalanceLossSoftmaxGate) {
  Rng rng(39);
  Tensor scores = Tensor::randn({8, 3}, rng, 1.0f, true);
  std::vector<int64_t> assignment = {1, 1, 1, 2, 2, 0, 1, 1};
  expect_grads_match(
      [&] { return ops::balance_loss(scores, assignment, 0.3, ops::BalanceGate::Softmax); },
      {scores});
}

TEST(OpsForward, BalanceLossSoftmaxMatchesHandValue) {
  // Two tokens on one expert, none on the other: coeffs are +1 and -1, and
  // only the assigned expert's probability enters the sum.
  Tensor scores = Tensor::from({2, 2}, {1.0f, 1.0f, 2.0f, 2.0f});
  Tensor loss = ops::balance_loss(scores, {0, 0}, 0.5, ops::BalanceGate::Softmax);
  EXPECT_NEAR(loss.item_f64(), 0.5 * (1.0 * 0.5 + 1.0 * 0.5), 1e-9);
}

TEST(OpsForward, BalanceLossRejectsDegenerateShapes) {
  Tensor none = Tensor::zeros({4, 0});
  EXPECT_THROW(ops::balance_loss(none, {0, 0, 0, 0}, 0.3), ContractError);
  Tensor empty = Tensor::zeros({0, 3});
  EXPECT_THROW(ops::balance_loss(empty, {}, 0.3), ContractError);
}

TEST(OpsGrad, CompositeGraphSharedInput) {
  // One tensor feeding two branches that rejoin.
  Rng rng(38);
  Tensor x = Tensor::randn({4, 4}, rng, 1.0f, true);
  Tensor w = Tensor::randn({4, 4}, rng, 1.0f, true);
  expect_grads_match(
      [&] {
        Tensor h = ops::matmul(x, w);
        Tensor a = ops::gelu(h);
        Tensor b = ops::sigmoid(h);
        return ops::sum(ops::add(a, b));
      },
      {x, w});
}

}  // namespace
