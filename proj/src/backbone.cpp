#include "moelab/backbone.hpp"

#include <algorithm>
#include <string>

namespace moelab {

int64_t BackboneConfig::moe_site() const {
  if (moe_insert_after_block >= 0) return moe_insert_after_block;
  return std::max<int64_t>(1, num_blocks / 2);
}

void BackboneConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
  if (hidden_dim < 1 || num_blocks < 1 || ffn_inner_dim < 1 || max_seq_len < 1) {
    throw ConfigError("backbone dimensions must be positive");
  }
  if (num_heads < 1 || hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (moe_site() < 1 || moe_site() > num_blocks) {
    throw ConfigError("moe_insert_after_block " + std::to_string(moe_site()) +
                      " outside [1, " + std::to_string(num_blocks) + "]");
  }
}

TransformerBlock::TransformerBlock(const BackboneConfig& cfg, Rng& rng)
    : ln_attn(cfg.hidden_dim),
      ln_ffn(cfg.hidden_dim),
      wq(cfg.hidden_dim, cfg.hidden_dim, rng),
      wk(cfg.hidden_dim, cfg.hidden_dim, rng),
      wv(cfg.hidden_dim, cfg.hidden_dim, rng),
      wo(cfg.hidden_dim, cfg.hidden_dim, rng, /*zero_w=*/true),
      ffn(cfg.hidden_dim, cfg.ffn_inner_dim, /*sublayers=*/1, rng) {}

Tensor TransformerBlock::forward(Tensor h, int64_t num_heads, int64_t seq_len) const {
  Tensor a = ln_attn.forward(h);
  Tensor att = ops::causal_self_attention(wq.forward(a), wk.forward(a), wv.forward(a),
                                          num_heads, seq_len);
  h = ops::add(h, wo.forward(att));
  return ops::add(h, ffn.forward(ln_ffn.forward(h)));
}

void TransformerBlock::register_params(ParamList& params, const std::string& prefix) const {
  ln_attn.register_params(params, prefix + ".ln_attn");
  wq.register_params(params, prefix + ".wq");
  wk.register_params(params, prefix + ".wk");
  wv.register_params(params, prefix + ".wv");
  wo.register_params(params, prefix + ".wo");
  ln_ffn.register_params(params, prefix + ".ln_ffn");
  ffn.register_params(params, prefix + ".ffn");
}

Backbone::Backbone(BackboneConfig cfg, Rng& rng) : ln_final(cfg.hidden_dim), cfg_(cfg) {
  cfg_.validate();
  token_table = Tensor::randn({cfg_.vocab_size, cfg_.hidden_dim}, rng, 0.02f, true);
  pos_table = Tensor::randn({cfg_.max_seq_len, cfg_.hidden_dim}, rng, 0.02f, true);
  blocks.reserve(cfg_.num_blocks);
  for (int64_t b = 0; b < cfg_.num_blocks; ++b) blocks.emplace_back(cfg_, rng);
}

Tensor Backbone::embed(const std::vector<int64_t>& ids, int64_t seq_len) const {
  if (ids.empty()) throw ContractError("embed needs at least one token");
  if (seq_len < 1 || seq_len > cfg_.max_seq_len) {
    throw ContractError("seq_len " + std::to_string(seq_len) + " outside [1, " +
                        std::to_string(cfg_.max_seq_len) + "]");
  }
  if (static_cast<int64_t>(ids.size()) % seq_len != 0) {
    throw DimensionError("token count " + std::to_string(ids.size()) +
                         " not a multiple of seq_len " + std::to_string(seq_len));
  }
  std::vector<int64_t> positions(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int64_t>(i) % seq_len;
  return ops::add(ops::embedding(token_table, ids), ops::embedding(pos_table, positions));
}

Tensor Backbone::front(Tensor h, int64_t seq_len) const {
  for (int64_t b = 0; b < cfg_.moe_site(); ++b) {
    h = blocks[static_cast<size_t>(b)].forward(h, cfg_.num_heads, seq_len);
  }
  return h;
}

Tensor Backbone::back(Tensor h, int64_t seq_len) const {
  for (int64_t b = cfg_.moe_site(); b < cfg_.num_blocks; ++b) {
    h = blocks[static_cast<size_t>(b)].forward(h, cfg_.num_heads, seq_len);
  }
  return h;
}

Tensor Backbone::logits(const Tensor& h) const {
  return ops::matmul_t(ln_final.forward(h), token_table);
}

void Backbone::register_params(ParamList& params) const {
  params.emplace_back("token_table", token_table);
  params.emplace_back("pos_table", pos_table);
  for (size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].register_params(params, "block" + std::to_string(b));
  }
  ln_final.register_params(params, "ln_final");
}

Tensor lm_loss(const Tensor& logits, const std::vector<int64_t>& targets) {
  return ops::cross_entropy(logits, targets, ops::Reduction::Mean, "lm_cross_entropy");
}

}  // namespace moelab
