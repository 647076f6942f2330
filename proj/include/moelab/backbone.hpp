#pragma once

#include <vector>

#include "moelab/layers.hpp"

namespace moelab {

struct BackboneConfig {
  int64_t vocab_size = 256;
  int64_t hidden_dim = 128;
  int64_t num_blocks = 4;
  int64_t num_heads = 8;
  int64_t ffn_inner_dim = 512;
  int64_t max_seq_len = 128;
  // Index of the block after which the expert layer sits (1-based count of
  // completed blocks). Negative means the middle of the stack.
  int64_t moe_insert_after_block = -1;

  int64_t moe_site() const;
  void validate() const;
};

// Pre-norm decoder block: h + Attn(LN(h)), then h + Ffn(LN(h)).
struct TransformerBlock {
  LayerNormParams ln_attn, ln_ffn;
  Linear wq, wk, wv, wo;
  FfnStack ffn;

  TransformerBlock(const BackboneConfig& cfg, Rng& rng);
  Tensor forward(Tensor h, int64_t num_heads, int64_t seq_len) const;
  void register_params(ParamList& params, const std::string& prefix) const;
};

// Decoder-only language model body. The expert layer is owned by the caller
// and spliced in between front() and back(); the output head is tied to the
// token embedding.
class Backbone {
 public:
  Backbone(BackboneConfig cfg, Rng& rng);

  const BackboneConfig& config() const { return cfg_; }

  // Token plus learned positional embedding. ids holds whole sequences of
  // seq_len tokens stacked back to back.
  Tensor embed(const std::vector<int64_t>& ids, int64_t seq_len) const;

  Tensor front(Tensor h, int64_t seq_len) const;  // blocks before the expert layer
  Tensor back(Tensor h, int64_t seq_len) const;   // blocks after it

  // Final norm and tied projection onto the vocabulary.
  Tensor logits(const Tensor& h) const;

  void register_params(ParamList& params) const;

  Tensor token_table, pos_table;
  std::vector<TransformerBlock> blocks;
  LayerNormParams ln_final;

 private:
  BackboneConfig cfg_;
};

// Mean next-token cross entropy; the recorded node is labeled
// "lm_cross_entropy" so training traces can be audited.
Tensor lm_loss(const Tensor& logits, const std::vector<int64_t>& targets);

}  // namespace moelab
