#pragma once

#include <cstdint>
#include <vector>

#include "moelab/tensor.hpp"

// Differentiable operations. Each op validates shapes, computes its output
// immediately, and, when a TapeScope is active, records a node with forward
// (replay) and backward closures. Without an active tape the ops are plain
// inference-mode functions.
namespace moelab::ops {

enum class Reduction { Sum, Mean };

// c = a · b, a:[m,k] b:[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// c = a · b^T, a:[m,c] b:[n,c]. Used for similarity scores against row sets.
Tensor matmul_t(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);

// x:[m,n] plus bias:[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor row_softmax(const Tensor& x);

// Per-row normalization with learned gain/shift, gamma/beta:[n].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// Row lookup table:[v,d] by ids; gradient scatter-adds into the table.
Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids);

// Selects rows of x in the given order.
Tensor gather_rows(const Tensor& x, std::vector<int64_t> rows);

// Inverse of a partition into gather_rows calls: parts[i] holds the rows of
// the result listed in row_indices[i]. Every output row must be covered
// exactly once.
Tensor assemble_rows(int64_t total_rows, const std::vector<Tensor>& parts,
                     const std::vector<std::vector<int64_t>>& row_indices);

// out[r] = x[r, cols[r]]; one column index per row.
Tensor gather_cols(const Tensor& x, std::vector<int64_t> cols);

// out[r, :] = x[r, :] * factors[r], factors:[m].
Tensor scale_rows(const Tensor& x, const Tensor& factors);

// Multi-head scaled dot-product attention with a causal mask. q, k, v are
// [b*seq_len, d] holding b sequences stacked row-wise; attention never
// crosses a sequence boundary. d must be divisible by num_heads.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             int64_t num_heads, int64_t seq_len);

// Softmax cross entropy of logits:[t,v] against integer targets. trace_label
// names the recorded node so training stages can be audited structurally.
Tensor cross_entropy(const Tensor& logits, std::vector<int64_t> targets,
                     Reduction reduction, const char* trace_label = "cross_entropy");

// Per-token gate factor entering the balance penalty: the sigmoid of the
// assigned score, or the softmax probability of the assigned expert.
enum class BalanceGate { Sigmoid, Softmax };

// Load-balance penalty over routing scores:[t,n] for a fixed assignment:
// alpha * sum_i ((count_i - t/n) / (t/n)) * sum_{assigned t} gate(score).
// The counts are treated as constants; gradients flow through the gates.
Tensor balance_loss(const Tensor& scores, const std::vector<int64_t>& assignment,
                    double alpha, BalanceGate gate = BalanceGate::Sigmoid);

}  // namespace moelab::ops
