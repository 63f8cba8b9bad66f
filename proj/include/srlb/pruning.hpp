#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "srlb/autodiff.hpp"
#include "srlb/container.hpp"
#include "srlb/model.hpp"
#include "srlb/tokens.hpp"

namespace srlb {

enum class PruneMethod { magnitude, wanda };
enum class Granularity { per_matrix, per_row };
enum class Scope { all, attention_only, ffn_only };

inline const char* to_string(PruneMethod m) { return m == PruneMethod::magnitude ? "magnitude" : "wanda"; }
inline const char* to_string(Granularity g) { return g == Granularity::per_matrix ? "per_matrix" : "per_row"; }
inline const char* to_string(Scope s) {
  switch (s) {
    case Scope::all: return "all";
    case Scope::attention_only: return "attention_only";
    case Scope::ffn_only: return "ffn_only";
  }
  return "?";
}

inline PruneMethod parse_prune_method(const std::string& s) {
  if (s == "magnitude") return PruneMethod::magnitude;
  if (s == "wanda") return PruneMethod::wanda;
  throw ConfigError("unknown pruner '" + s + "' (expected magnitude|wanda)");
}
inline Granularity parse_granularity(const std::string& s) {
  if (s == "per_matrix") return Granularity::per_matrix;
  if (s == "per_row") return Granularity::per_row;
  throw ConfigError("unknown granularity '" + s + "' (expected per_matrix|per_row)");
}
inline Scope parse_scope(const std::string& s) {
  if (s == "all") return Scope::all;
  if (s == "attention_only") return Scope::attention_only;
  if (s == "ffn_only") return Scope::ffn_only;
  throw ConfigError("unknown scope '" + s + "' (expected all|attention_only|ffn_only)");
}

inline Granularity default_granularity(PruneMethod m) {
  return m == PruneMethod::wanda ? Granularity::per_row : Granularity::per_matrix;
}

inline bool in_scope(Scope s, MatrixKind k) {
  switch (s) {
    case Scope::all: return true;
    case Scope::attention_only: return is_attention(k);
    case Scope::ffn_only: return !is_attention(k);
  }
  return false;
}

struct PrunerSpec {
  PruneMethod method = PruneMethod::magnitude;
  double sparsity = 0.5;
  std::optional<Granularity> granularity;  // unset: per-method default
  Scope scope = Scope::all;

  Granularity resolved_granularity() const { return granularity.value_or(default_granularity(method)); }
};

// Number of entries kept in a unit of `numel` weights at sparsity s.
inline std::size_t kept_count(std::size_t numel, double s) {
  const auto pruned = static_cast<std::size_t>(std::floor(s * static_cast<double>(numel) + 1e-9));
  return numel - std::min(pruned, numel);
}

using BlockMatrices = std::array<Tensor, kAllMatrices.size()>;

inline std::size_t matrix_index(MatrixKind k) { return static_cast<std::size_t>(k); }

// Binary keep-masks (1 = kept) for every prunable matrix, stored as f32 0/1.
struct SparsityMask {
  double sparsity = 0.0;
  Granularity granularity = Granularity::per_matrix;
  Scope scope = Scope::all;
  PruneMethod method = PruneMethod::magnitude;
  std::vector<BlockMatrices> blocks;

  const Tensor& at(std::size_t block, MatrixKind k) const { return blocks.at(block)[matrix_index(k)]; }

  bool operator==(const SparsityMask& o) const {
    if (sparsity != o.sparsity || granularity != o.granularity || scope != o.scope || method != o.method ||
        blocks.size() != o.blocks.size())
      return false;
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (std::size_t k = 0; k < kAllMatrices.size(); ++k)
        if (!blocks[b][k].bit_equal(o.blocks[b][k])) return false;
    return true;
  }
};

// Per prunable matrix, L2 norm of each input feature over all calibration positions.
struct ActivationNorms {
  std::vector<BlockMatrices> blocks;

  const Tensor& at(std::size_t block, MatrixKind k) const { return blocks.at(block)[matrix_index(k)]; }
};

// L2 norm of each feature (last axis) of x over all leading positions.
inline Tensor input_feature_norms(const Tensor& x) {
  const std::size_t d = x.dim(-1);
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc[i % d] += static_cast<double>(x[i]) * x[i];
  Tensor t({d});
  for (std::size_t j = 0; j < d; ++j) t[j] = static_cast<float>(std::sqrt(acc[j]));
  return t;
}

inline ActivationNorms collect_activation_norms(const Model& model, const TokenMatrix& calib,
                                                std::size_t chunk_rows = 8) {
  if (calib.rows == 0) throw ContractError("collect_activation_norms: empty calibration set");
  const ModelConfig& c = model.config;
  std::vector<std::array<std::vector<double>, kAllMatrices.size()>> sq(c.n_blocks);
  for (auto& blk : sq)
    for (MatrixKind k : kAllMatrices) {
      const std::size_t in = k == MatrixKind::w2 ? c.ffn_dim : c.hidden;
      blk[matrix_index(k)].assign(in, 0.0);
    }

  for (std::size_t r0 = 0; r0 < calib.rows; r0 += chunk_rows) {
    std::vector<std::size_t> idx(std::min(chunk_rows, calib.rows - r0));
    std::iota(idx.begin(), idx.end(), r0);
    TokenMatrix chunk = calib.gather(idx);
    Tensor x = embed(model, chunk);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      ad::Graph g;
      BlockVars p = bind_block(g, model.blocks[b], false);
      BlockTaps taps;
      ad::Var out = block_forward(c, p, g.constant(x), &taps);
      for (MatrixKind k : kAllMatrices) {
        const Tensor& in = g.value(taps.input_of(k));
        auto& acc = sq[b][matrix_index(k)];
        const std::size_t d = acc.size();
        for (std::size_t i = 0; i < in.numel(); ++i) {
          const double v = in[i];
          acc[i % d] += v * v;
        }
      }
      x = g.value(out);
    }
  }

  ActivationNorms norms;
  norms.blocks.resize(c.n_blocks);
  for (std::size_t b = 0; b < c.n_blocks; ++b)
    for (MatrixKind k : kAllMatrices) {
      const auto& acc = sq[b][matrix_index(k)];
      Tensor t({acc.size()});
      for (std::size_t i = 0; i < acc.size(); ++i) t[i] = static_cast<float>(std::sqrt(acc[i]));
      norms.blocks[b][matrix_index(k)] = std::move(t);
    }
  return norms;
}

// magnitude: |W|; wanda: |W_ij| * norms_j.
inline Tensor score(const Tensor& matrix, PruneMethod method, const Tensor* norms = nullptr) {
  if (matrix.rank() != 2) throw DimensionError("score: expected a matrix, got " + shape_str(matrix.shape()));
  Tensor s(matrix.shape());
  if (method == PruneMethod::magnitude) {
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] = std::fabs(matrix[i]);
    return s;
  }
  if (!norms) throw ContractError("score: wanda scoring needs activation norms");
  const std::size_t cols = matrix.dim(1);
  if (norms->shape() != Shape{cols}) {
    throw DimensionError("score: norms " + shape_str(norms->shape()) + " do not match input dim of " +
                         shape_str(matrix.shape()));
  }
  for (std::size_t i = 0; i < s.numel(); ++i) s[i] = std::fabs(matrix[i]) * (*norms)[i % cols];
  return s;
}

// Keep the top numel - floor(s*numel) scores per unit; ties keep the smaller flat index.
inline Tensor select_mask(const Tensor& scores, double s, Granularity granularity) {
  if (!(s >= 0.0 && s <= 1.0)) throw ContractError("select_mask: sparsity must be in [0, 1]");
  Tensor mask(scores.shape());
  const std::size_t unit = granularity == Granularity::per_row ? scores.dim(-1) : scores.numel();
  const std::size_t keep = kept_count(unit, s);
  std::vector<std::size_t> order(unit);
  for (std::size_t base = 0; base < scores.numel(); base += unit) {
    std::iota(order.begin(), order.end(), base);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1.0f;
  }
  return mask;
}

// Masks are computed from the dense model once. Wanda needs calibration tokens.
inline SparsityMask compute_mask(const Model& dense, const PrunerSpec& spec, const TokenMatrix* calib = nullptr) {
  if (!(spec.sparsity >= 0.0 && spec.sparsity <= 1.0)) throw ConfigError("pruner: sparsity must be in [0, 1]");
  SparsityMask mask;
  mask.sparsity = spec.sparsity;
  mask.granularity = spec.resolved_granularity();
  mask.scope = spec.scope;
  mask.method = spec.method;
  std::optional<ActivationNorms> norms;
  if (spec.method == PruneMethod::wanda) {
    if (!calib) throw ContractError("compute_mask: wanda needs calibration data");
    norms = collect_activation_norms(dense, *calib);
  }
  mask.blocks.resize(dense.blocks.size());
  for (std::size_t b = 0; b < dense.blocks.size(); ++b) {
    for (MatrixKind k : kAllMatrices) {
      const Tensor& w = dense.blocks[b].matrix(k);
      if (!in_scope(spec.scope, k)) {
        mask.blocks[b][matrix_index(k)] = Tensor::ones(w.shape());
        continue;
      }
      Tensor sc = score(w, spec.method, norms ? &norms->at(b, k) : nullptr);
      mask.blocks[b][matrix_index(k)] = select_mask(sc, spec.sparsity, mask.granularity);
    }
  }
  return mask;
}

inline void check_mask_shapes(const Model& model, const SparsityMask& mask) {
  if (mask.blocks.size() != model.blocks.size()) throw DimensionError("apply_mask: block count mismatch");
  for (std::size_t b = 0; b < model.blocks.size(); ++b)
    for (MatrixKind k : kAllMatrices)
      if (mask.at(b, k).shape() != model.blocks[b].matrix(k).shape()) {
        throw DimensionError(std::string("apply_mask: mask for block ") + std::to_string(b) + " " + matrix_name(k) +
                             " has shape " + shape_str(mask.at(b, k).shape()));
      }
}

inline void apply_mask_to_block(TransformerBlock& block, const BlockMatrices& masks) {
  for (MatrixKind k : kAllMatrices) {
    Tensor& w = block.matrix(k);
    const Tensor& m = masks[matrix_index(k)];
    for (std::size_t i = 0; i < w.numel(); ++i)
      if (m[i] == 0.0f) w[i] = 0.0f;
  }
}

inline void apply_mask(Model& model, const SparsityMask& mask) {
  check_mask_shapes(model, mask);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) apply_mask_to_block(model.blocks[b], mask.blocks[b]);
}

inline std::string mask_tensor_name(std::size_t block, MatrixKind k) {
  return "blocks." + std::to_string(block) + "." + matrix_name(k) + ".mask";
}

inline Container mask_container(const SparsityMask& mask, const std::string& config_hash = {}) {
  Container c;
  c.meta = {{"kind", "mask"},
            {"s", mask.sparsity},
            {"granularity", to_string(mask.granularity)},
            {"scope", to_string(mask.scope)},
            {"method", to_string(mask.method)},
            {"n_blocks", mask.blocks.size()}};
  if (!config_hash.empty()) c.meta["config_hash"] = config_hash;
  for (std::size_t b = 0; b < mask.blocks.size(); ++b)
    for (MatrixKind k : kAllMatrices) {
      const Tensor& m = mask.at(b, k);
      ContainerEntry e{mask_tensor_name(b, k), "u8", m.shape(), std::vector<unsigned char>(m.numel())};
      for (std::size_t i = 0; i < m.numel(); ++i) e.bytes[i] = m[i] != 0.0f ? 1 : 0;
      c.entries.push_back(std::move(e));
    }
  return c;
}

inline SparsityMask mask_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "mask") throw HeaderMismatchError("mask: container is not a mask file");
  SparsityMask mask;
  try {
    mask.sparsity = c.meta.at("s").get<double>();
    mask.granularity = parse_granularity(c.meta.at("granularity").get<std::string>());
    mask.scope = parse_scope(c.meta.at("scope").get<std::string>());
    mask.method = parse_prune_method(c.meta.at("method").get<std::string>());
    mask.blocks.resize(c.meta.at("n_blocks").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw HeaderMismatchError(std::string("mask: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw HeaderMismatchError(std::string("mask: bad header: ") + e.what());
  }
  for (std::size_t b = 0; b < mask.blocks.size(); ++b)
    for (MatrixKind k : kAllMatrices) {
      const ContainerEntry* e = c.find(mask_tensor_name(b, k));
      if (!e) throw HeaderMismatchError("mask: missing tensor " + mask_tensor_name(b, k));
      if (e->dtype != "u8") throw HeaderMismatchError("mask: tensor " + e->name + " is not u8");
      Tensor t(e->shape);
      for (std::size_t i = 0; i < t.numel(); ++i) {
        if (e->bytes[i] > 1) throw HeaderMismatchError("mask: non-binary entry in " + e->name);
        t[i] = static_cast<float>(e->bytes[i]);
      }
      mask.blocks[b][matrix_index(k)] = std::move(t);
    }
  return mask;
}

inline void save_mask(const SparsityMask& mask, const std::string& path, const std::string& config_hash = {}) {
  save_container(path, mask_container(mask, config_hash));
}
inline SparsityMask load_mask(const std::string& path) { return mask_from_container(load_container(path)); }

}  // namespace srlb
