#pragma once

// Tiny pre-norm decoder-only transformer, decomposed into blocks.
//
// Linear weights are stored [out, in] and applied as y = x W^T + b. The
// output head is [H, V] and has no bias. Attention and FFN blocks are the
// only prunable parts; embeddings, final norm and head are never masked.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "srlb/autodiff.hpp"
#include "srlb/errors.hpp"
#include "srlb/tensor.hpp"
#include "srlb/tokens.hpp"

namespace srlb {

struct ModelConfig {
  std::size_t n_blocks = 4;
  std::size_t hidden = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab = 258;
  std::size_t max_seq = 64;
  std::uint32_t eos_token_id = 256;
  std::uint32_t bos_token_id = 257;

  std::size_t head_dim() const { return hidden / n_heads; }

  void validate() const {
    if (n_blocks == 0 || hidden == 0 || n_heads == 0 || ffn_dim == 0 || vocab == 0 || max_seq == 0) {
      throw ConfigError("model config: all dimensions must be >= 1");
    }
    if (hidden % n_heads != 0) throw ConfigError("model config: hidden must be divisible by n_heads");
    if (eos_token_id >= vocab || bos_token_id >= vocab) throw ConfigError("model config: special ids must be < vocab");
    if (eos_token_id == bos_token_id) throw ConfigError("model config: eos and bos must differ");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class MatrixKind { wq, wk, wv, wo, w1, w2 };

inline constexpr std::array<MatrixKind, 6> kAllMatrices = {MatrixKind::wq, MatrixKind::wk, MatrixKind::wv,
                                                           MatrixKind::wo, MatrixKind::w1, MatrixKind::w2};

inline const char* matrix_name(MatrixKind k) {
  switch (k) {
    case MatrixKind::wq: return "wq";
    case MatrixKind::wk: return "wk";
    case MatrixKind::wv: return "wv";
    case MatrixKind::wo: return "wo";
    case MatrixKind::w1: return "w1";
    case MatrixKind::w2: return "w2";
  }
  return "?";
}

inline bool is_attention(MatrixKind k) { return k != MatrixKind::w1 && k != MatrixKind::w2; }

struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;

  static TransformerBlock zeros(const ModelConfig& c) {
    const std::size_t h = c.hidden, f = c.ffn_dim;
    return TransformerBlock{Tensor::zeros({h}), Tensor::zeros({h}),    Tensor::zeros({h, h}), Tensor::zeros({h}),
                            Tensor::zeros({h, h}), Tensor::zeros({h}), Tensor::zeros({h, h}), Tensor::zeros({h}),
                            Tensor::zeros({h, h}), Tensor::zeros({h}), Tensor::zeros({h}),    Tensor::zeros({h}),
                            Tensor::zeros({f, h}), Tensor::zeros({f}), Tensor::zeros({h, f}), Tensor::zeros({h})};
  }

  Tensor& matrix(MatrixKind k) {
    switch (k) {
      case MatrixKind::wq: return wq;
      case MatrixKind::wk: return wk;
      case MatrixKind::wv: return wv;
      case MatrixKind::wo: return wo;
      case MatrixKind::w1: return w1;
      case MatrixKind::w2: return w2;
    }
    throw ContractError("unknown matrix kind");
  }
  const Tensor& matrix(MatrixKind k) const { return const_cast<TransformerBlock*>(this)->matrix(k); }

  // Canonical parameter order; names are relative to the block.
  std::vector<std::pair<std::string_view, Tensor*>> params() {
    return {{"ln1.gain", &ln1_gain}, {"ln1.bias", &ln1_bias}, {"wq", &wq},     {"bq", &bq},
            {"wk", &wk},             {"bk", &bk},             {"wv", &wv},     {"bv", &bv},
            {"wo", &wo},             {"bo", &bo},             {"ln2.gain", &ln2_gain},
            {"ln2.bias", &ln2_bias}, {"w1", &w1},             {"b1", &b1},     {"w2", &w2},
            {"b2", &b2}};
  }
  std::vector<std::pair<std::string_view, const Tensor*>> params() const {
    auto ps = const_cast<TransformerBlock*>(this)->params();
    std::vector<std::pair<std::string_view, const Tensor*>> out;
    for (auto& [n, t] : ps) out.emplace_back(n, t);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : params()) n += t->numel();
    return n;
  }

  bool bit_equal(const TransformerBlock& o) const {
    auto a = params(), b = o.params();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!a[i].second->bit_equal(*b[i].second)) return false;
    return true;
  }
};

struct Model {
  ModelConfig config;
  Tensor tok_embed;   // [V, H]
  Tensor pos_embed;   // [T_max, H]
  Tensor final_gain;  // [H]
  Tensor final_bias;  // [H]
  Tensor head;        // [H, V]
  std::vector<TransformerBlock> blocks;

  // Every named tensor in checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out{{"tok_embed", &tok_embed}, {"pos_embed", &pos_embed}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      for (auto& [n, t] : blocks[i].params()) out.emplace_back("blocks." + std::to_string(i) + "." + std::string(n), t);
    }
    out.emplace_back("final_ln.gain", &final_gain);
    out.emplace_back("final_ln.bias", &final_bias);
    out.emplace_back("head", &head);
    return out;
  }
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, t] : const_cast<Model*>(this)->named_tensors()) out.emplace_back(n, t);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_tensors()) n += t->numel();
    return n;
  }

  bool bit_equal(const Model& o) const {
    if (!(config == o.config) || blocks.size() != o.blocks.size()) return false;
    auto a = named_tensors(), b = o.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].first != b[i].first || !a[i].second->bit_equal(*b[i].second)) return false;
    return true;
  }
};

// Closed-form parameter counts.
inline std::size_t block_param_count(const ModelConfig& c) {
  const std::size_t h = c.hidden, f = c.ffn_dim;
  return 4 * (h * h + h) + (f * h + f) + (h * f + h) + 4 * h;
}

inline std::size_t model_param_count(const ModelConfig& c) {
  const std::size_t h = c.hidden;
  return c.vocab * h + c.max_seq * h + c.n_blocks * block_param_count(c) + 2 * h + h * c.vocab;
}

// N(0, 0.02) weights, output projections (wo, w2) scaled by 1/sqrt(2B),
// zero biases, unit norm gains.
inline Model init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const real std_base = 0.02f;
  const real std_out = std_base / std::sqrt(2.0f * static_cast<real>(config.n_blocks));
  auto normal = [&rng](Shape s, real sd) {
    Tensor t(std::move(s));
    std::normal_distribution<real> dist(0.0f, sd);
    for (real& v : t.data()) v = dist(rng);
    return t;
  };
  const std::size_t h = config.hidden, f = config.ffn_dim;
  Model m;
  m.config = config;
  m.tok_embed = normal({config.vocab, h}, std_base);
  m.pos_embed = normal({config.max_seq, h}, std_base);
  for (std::size_t i = 0; i < config.n_blocks; ++i) {
    TransformerBlock b = TransformerBlock::zeros(config);
    b.ln1_gain = Tensor::ones({h});
    b.ln2_gain = Tensor::ones({h});
    b.wq = normal({h, h}, std_base);
    b.wk = normal({h, h}, std_base);
    b.wv = normal({h, h}, std_base);
    b.wo = normal({h, h}, std_out);
    b.w1 = normal({f, h}, std_base);
    b.w2 = normal({h, f}, std_out);
    m.blocks.push_back(std::move(b));
  }
  m.final_gain = Tensor::ones({h});
  m.final_bias = Tensor::zeros({h});
  m.head = normal({h, config.vocab}, std_base);
  return m;
}

// Keep-mask for causal attention: keep[i, j] = (j <= i).
inline Tensor causal_mask(std::size_t t) {
  Tensor m({t, t});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.at(i, j) = 1.0f;
  return m;
}

// Block parameters bound onto a graph, either as trainable params or constants.
struct BlockVars {
  ad::Var ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2;

  ad::Var matrix(MatrixKind k) const {
    switch (k) {
      case MatrixKind::wq: return wq;
      case MatrixKind::wk: return wk;
      case MatrixKind::wv: return wv;
      case MatrixKind::wo: return wo;
      case MatrixKind::w1: return w1;
      case MatrixKind::w2: return w2;
    }
    throw ContractError("unknown matrix kind");
  }
};

// Params are bound in TransformerBlock::params() order, so backward() returns
// gradients in that order.
inline BlockVars bind_block(ad::Graph& g, const TransformerBlock& b, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? g.param(t) : g.constant(t); };
  BlockVars v;
  v.ln1_gain = put(b.ln1_gain);
  v.ln1_bias = put(b.ln1_bias);
  v.wq = put(b.wq);
  v.bq = put(b.bq);
  v.wk = put(b.wk);
  v.bk = put(b.bk);
  v.wv = put(b.wv);
  v.bv = put(b.bv);
  v.wo = put(b.wo);
  v.bo = put(b.bo);
  v.ln2_gain = put(b.ln2_gain);
  v.ln2_bias = put(b.ln2_bias);
  v.w1 = put(b.w1);
  v.b1 = put(b.b1);
  v.w2 = put(b.w2);
  v.b2 = put(b.b2);
  return v;
}

// Inputs to each prunable matrix, captured during a block forward.
struct BlockTaps {
  ad::Var ln1_out;      // input of wq, wk, wv
  ad::Var attn_concat;  // input of wo
  ad::Var ln2_out;      // input of w1
  ad::Var ffn_act;      // input of w2

  ad::Var input_of(MatrixKind k) const {
    switch (k) {
      case MatrixKind::wq:
      case MatrixKind::wk:
      case MatrixKind::wv: return ln1_out;
      case MatrixKind::wo: return attn_concat;
      case MatrixKind::w1: return ln2_out;
      case MatrixKind::w2: return ffn_act;
    }
    throw ContractError("unknown matrix kind");
  }
};

inline ad::Var linear(ad::Var x, ad::Var w, ad::Var b) { return ad::add(ad::matmul(x, ad::transpose(w)), b); }

// x [N, T, H] -> x + Attn(LN1(x)), then + FFN(LN2(.)).
inline ad::Var block_forward(const ModelConfig& c, const BlockVars& p, ad::Var x, BlockTaps* taps = nullptr) {
  const Tensor& xv = x.graph->value(x);
  if (xv.rank() != 3 || xv.dim(2) != c.hidden) {
    throw DimensionError("forward_block: expected [N,T," + std::to_string(c.hidden) + "], got " + shape_str(xv.shape()));
  }
  const std::size_t t = xv.dim(1);
  if (t > c.max_seq) throw DimensionError("forward_block: sequence length exceeds max_seq");
  const std::size_t hd = c.head_dim();
  const real inv_sqrt = 1.0f / std::sqrt(static_cast<real>(hd));
  const Tensor keep = causal_mask(t);

  ad::Var ln1 = ad::layer_norm(x, p.ln1_gain, p.ln1_bias);
  ad::Var q = linear(ln1, p.wq, p.bq);
  ad::Var k = linear(ln1, p.wk, p.bk);
  ad::Var v = linear(ln1, p.wv, p.bv);
  std::vector<ad::Var> heads;
  heads.reserve(c.n_heads);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    ad::Var qh = ad::slice(q, -1, h * hd, hd);
    ad::Var kh = ad::slice(k, -1, h * hd, hd);
    ad::Var vh = ad::slice(v, -1, h * hd, hd);
    ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    scores = ad::mask_fill(scores, keep, -1e9f);
    heads.push_back(ad::matmul(ad::softmax_lastdim(scores), vh));
  }
  ad::Var attn = heads.size() == 1 ? heads.front() : ad::concat(heads, -1);
  ad::Var h1 = ad::add(x, linear(attn, p.wo, p.bo));
  ad::Var ln2 = ad::layer_norm(h1, p.ln2_gain, p.ln2_bias);
  ad::Var act = ad::gelu(linear(ln2, p.w1, p.b1));
  ad::Var out = ad::add(h1, linear(act, p.w2, p.b2));
  if (taps) *taps = BlockTaps{ln1, attn, ln2, act};
  return out;
}

// Value-level block forward. Same code path as training, so results match bit-exactly.
inline Tensor forward_block(const ModelConfig& c, const TransformerBlock& block, const Tensor& x) {
  ad::Graph g;
  BlockVars p = bind_block(g, block, false);
  return g.value(block_forward(c, p, g.constant(x)));
}

inline ad::Var embed_forward(ad::Graph& g, const Model& m, const TokenMatrix& tokens) {
  if (tokens.rows == 0 || tokens.cols == 0) throw DimensionError("embed: empty token matrix");
  if (tokens.cols > m.config.max_seq) throw DimensionError("embed: sequence length exceeds max_seq");
  for (std::uint32_t id : tokens.ids) {
    if (id >= m.config.vocab) {
      throw DimensionError("embed: token id " + std::to_string(id) + " out of range for vocab " +
                           std::to_string(m.config.vocab));
    }
  }
  ad::Var tok = ad::embedding_lookup(g.constant(m.tok_embed), tokens.ids, {tokens.rows, tokens.cols});
  std::vector<std::uint32_t> pos(tokens.cols);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::uint32_t>(i);
  ad::Var pe = ad::embedding_lookup(g.constant(m.pos_embed), pos, {tokens.cols});
  return ad::add(tok, pe);
}

inline ad::Var head_forward(ad::Graph& g, const Model& m, ad::Var x) {
  ad::Var n = ad::layer_norm(x, g.constant(m.final_gain), g.constant(m.final_bias));
  return ad::matmul(n, g.constant(m.head));
}

inline Tensor embed(const Model& m, const TokenMatrix& tokens) {
  ad::Graph g;
  return g.value(embed_forward(g, m, tokens));
}

inline Tensor head_logits(const Model& m, const Tensor& x) {
  ad::Graph g;
  return g.value(head_forward(g, m, g.constant(x)));
}

// tokens [N, T] -> logits [N, T, V]; equals embed -> blocks -> head bit-exactly.
inline Tensor forward_full(const Model& m, const TokenMatrix& tokens) {
  Tensor x = embed(m, tokens);
  for (const TransformerBlock& b : m.blocks) x = forward_block(m.config, b, x);
  return head_logits(m, x);
}

// Divide-and-conquer view over a model. Blocks are references into the
// model, so edits through the view land in the model.
class BlockSequence {
 public:
  explicit BlockSequence(Model& m) : model_(&m) {}

  std::size_t size() const noexcept { return model_->blocks.size(); }
  TransformerBlock& operator[](std::size_t i) { return model_->blocks.at(i); }
  const TransformerBlock& operator[](std::size_t i) const { return model_->blocks.at(i); }

  Tensor embed(const TokenMatrix& tokens) const { return srlb::embed(*model_, tokens); }
  Tensor forward(std::size_t i, const Tensor& x) const { return forward_block(model_->config, (*this)[i], x); }
  Tensor head(const Tensor& x) const { return head_logits(*model_, x); }

 private:
  Model* model_;
};

inline BlockSequence split_blocks(Model& m) { return BlockSequence(m); }

}  // namespace srlb
