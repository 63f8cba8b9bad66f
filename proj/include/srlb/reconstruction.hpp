#pragma once

// Reconstruction of dense predictions under a fixed sparsity mask.
//
//   LR        closed-form ridge least squares per linear layer, sparse inputs
//   BR        Adam on one block, sparse-propagated inputs
//   BR_GP     Adam on one block, dense (globally propagated) inputs
//   BR_GP_CR  Adam on overlapping block pairs with dense inputs
//
// Every BR/CR target is the dense model's own activation x̄_{i+1} (x̄_{i+2}
// for pairs). Pruned weights stay exactly zero because their gradients are
// masked before the Adam update, which leaves their moments at zero.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "srlb/adam.hpp"
#include "srlb/autodiff.hpp"
#include "srlb/model.hpp"
#include "srlb/pruning.hpp"
#include "srlb/tokens.hpp"

namespace srlb {

enum class ReconMethod { none, LR, BR, BR_GP, BR_GP_CR };

inline constexpr std::array<ReconMethod, 5> kAllReconMethods = {ReconMethod::none, ReconMethod::LR, ReconMethod::BR,
                                                                 ReconMethod::BR_GP, ReconMethod::BR_GP_CR};

inline const char* to_string(ReconMethod m) {
  switch (m) {
    case ReconMethod::none: return "none";
    case ReconMethod::LR: return "LR";
    case ReconMethod::BR: return "BR";
    case ReconMethod::BR_GP: return "BR_GP";
    case ReconMethod::BR_GP_CR: return "BR_GP_CR";
  }
  return "?";
}

inline ReconMethod parse_recon_method(const std::string& s) {
  for (ReconMethod m : kAllReconMethods)
    if (s == to_string(m)) return m;
  throw ConfigError("unknown reconstruction method '" + s + "' (expected none|LR|BR|BR_GP|BR_GP_CR)");
}

struct ReconConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  float base_lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  double ridge_fraction = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("recon config: epochs and batch_size must be positive");
    if (!(base_lr > 0.0f)) throw ConfigError("recon config: base_lr must be positive");
    if (!(ridge_fraction >= 0.0)) throw ConfigError("recon config: ridge_fraction must be >= 0");
  }
};

struct BlockError {
  std::size_t index = 0;
  double e_calib = 0.0;
  double e_test = 0.0;
  bool operator==(const BlockError&) const = default;
};

struct ErrorTrace {
  std::string pruner;
  std::string method;
  std::string calib_source;
  std::uint64_t seed = 0;
  std::vector<BlockError> blocks;
  double logit_error = 0.0;  // ||f(dense) - f(sparse)||^2 / (N T V) on calibration data
  bool operator==(const ErrorTrace&) const = default;
};

// Loss before training and mean loss of each epoch.
struct ReconHistory {
  std::size_t first_block = 0;
  std::size_t n_blocks = 1;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
};

// Observation points used by tests and the acceptance suite.
struct PipelineHooks {
  // Before optimizing the unit starting at `first_block` (BR, BR_GP, CR).
  std::function<void(std::size_t first_block, std::size_t n_blocks, const Tensor& inputs, const Tensor& targets)>
      on_unit_start;
  // After every optimizer step (BR family) or every layer solve (LR).
  std::function<void(const Model& sparse, std::size_t first_block, std::uint64_t step)> on_step;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// (1 / N H T) ||dense - sparse||^2.
inline double normalized_block_error(const Tensor& dense_out, const Tensor& sparse_out) {
  if (dense_out.shape() != sparse_out.shape()) {
    throw DimensionError("normalized_block_error: shapes " + shape_str(dense_out.shape()) + " and " +
                         shape_str(sparse_out.shape()));
  }
  return squared_distance(dense_out, sparse_out) / static_cast<double>(dense_out.numel());
}

// Inputs of every block plus the final output: acts[i] feeds block i, acts[B] is the last output.
inline std::vector<Tensor> propagate(const Model& m, const TokenMatrix& data) {
  std::vector<Tensor> acts;
  acts.reserve(m.blocks.size() + 1);
  acts.push_back(embed(m, data));
  for (const TransformerBlock& b : m.blocks) acts.push_back(forward_block(m.config, b, acts.back()));
  return acts;
}

inline std::vector<Tensor> dense_activations(const Model& dense, const TokenMatrix& data) { return propagate(dense, data); }

inline std::vector<Tensor> sparse_propagated_inputs(const Model& sparse, const TokenMatrix& data) {
  return propagate(sparse, data);
}

// ---------------------------------------------------------------------------
// Layer-wise least squares

// Gram matrix X^T X of row-sample inputs x [S, D], accumulated in double.
inline Eigen::MatrixXd gram(const Tensor& x) {
  const std::size_t d = x.dim(-1), s = x.numel() / d;
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> xm(
      x.ptr(), static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(d));
  Eigen::MatrixXd xd = xm.cast<double>();
  return xd.transpose() * xd;
}

// Squared output residual ||(W_dense - W) X^T||^2 expressed through the Gram matrix.
inline double lsq_residual(const Tensor& w_dense, const Tensor& w, const Eigen::MatrixXd& g) {
  const auto rows = static_cast<Eigen::Index>(w.dim(0)), cols = static_cast<Eigen::Index>(w.dim(1));
  Eigen::MatrixXd diff(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      diff(r, c) = static_cast<double>(w_dense[r * cols + c]) - static_cast<double>(w[r * cols + c]);
  return (diff * g).cwiseProduct(diff).sum();
}

// Per output row r, minimize ||W̄_r X - c X_K||^2 + λ ||c - W̄_{r,K}||^2 over the
// kept coefficients K, with λ = ridge_fraction * mean(diag(X^T X)).
// Solved for the correction δ = c - W̄_{r,K}:
//   (G_KK + λI) δ = G_KP W̄_{r,P}
// so a row with nothing pruned returns W̄_r exactly. Pruned coefficients come
// back as exact zeros.
inline Tensor layer_recon_lsq(const Tensor& w_dense, const Tensor& mask, const Eigen::MatrixXd& g,
                              double ridge_fraction, const std::string& layer_id = "layer") {
  if (w_dense.rank() != 2 || mask.shape() != w_dense.shape()) {
    throw DimensionError("layer_recon_lsq(" + layer_id + "): weight " + shape_str(w_dense.shape()) + " vs mask " +
                         shape_str(mask.shape()));
  }
  const std::size_t rows = w_dense.dim(0), cols = w_dense.dim(1);
  if (static_cast<std::size_t>(g.rows()) != cols) {
    throw DimensionError("layer_recon_lsq(" + layer_id + "): input dim " + std::to_string(g.rows()) +
                         " does not match weight " + shape_str(w_dense.shape()));
  }
  const double lambda = ridge_fraction * g.diagonal().mean();
  Tensor out(w_dense.shape());
  std::vector<Eigen::Index> kept, pruned;
  kept.reserve(cols);
  pruned.reserve(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    kept.clear();
    pruned.clear();
    for (std::size_t c = 0; c < cols; ++c)
      (mask[r * cols + c] != 0.0f ? kept : pruned).push_back(static_cast<Eigen::Index>(c));
    if (kept.empty()) continue;
    if (pruned.empty()) {
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = w_dense[r * cols + c];
      continue;
    }
    const auto k = static_cast<Eigen::Index>(kept.size());
    Eigen::MatrixXd a(k, k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) a(i, j) = g(kept[i], kept[j]);
      a(i, i) += lambda;
      for (Eigen::Index p : pruned) rhs(i) += g(kept[i], p) * static_cast<double>(w_dense[r * cols + static_cast<std::size_t>(p)]);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    Eigen::VectorXd delta;
    if (llt.info() == Eigen::Success) delta = llt.solve(rhs);
    if (llt.info() != Eigen::Success || !delta.allFinite()) {
      throw NumericalError("layer_recon_lsq(" + layer_id + "): singular system at row " + std::to_string(r) +
                           " (lambda=" + std::to_string(lambda) + ")");
    }
    for (Eigen::Index i = 0; i < k; ++i) {
      const std::size_t c = static_cast<std::size_t>(kept[i]);
      out[r * cols + c] = static_cast<float>(static_cast<double>(w_dense[r * cols + c]) + delta(i));
    }
  }
  require_finite(out, "layer_recon_lsq");
  return out;
}

// Convenience overload taking raw inputs x [S, D] (or [..., D]).
inline Tensor layer_recon_lsq(const Tensor& w_dense, const Tensor& mask, const Tensor& x, double ridge_fraction,
                              const std::string& layer_id = "layer") {
  return layer_recon_lsq(w_dense, mask, gram(x), ridge_fraction, layer_id);
}

// Sequentially re-solves a block's prunable matrices on its sparse inputs:
// q/k/v first, then wo on the updated attention, then w1, then w2.
inline void layer_recon_block(const ModelConfig& c, TransformerBlock& block, const TransformerBlock& dense_block,
                              const BlockMatrices& masks, const Tensor& inputs, double ridge_fraction,
                              std::size_t block_index, const std::function<void(MatrixKind)>& after_solve = {}) {
  const std::vector<std::vector<MatrixKind>> stages = {
      {MatrixKind::wq, MatrixKind::wk, MatrixKind::wv}, {MatrixKind::wo}, {MatrixKind::w1}, {MatrixKind::w2}};
  for (const auto& stage : stages) {
    ad::Graph g;
    BlockVars p = bind_block(g, block, false);
    BlockTaps taps;
    block_forward(c, p, g.constant(inputs), &taps);
    const Eigen::MatrixXd gm = gram(g.value(taps.input_of(stage.front())));
    for (MatrixKind k : stage) {
      const std::string id = "block " + std::to_string(block_index) + " " + matrix_name(k);
      block.matrix(k) = layer_recon_lsq(dense_block.matrix(k), masks[matrix_index(k)], gm, ridge_fraction, id);
      if (after_solve) after_solve(k);
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient-based reconstruction of a chain of consecutive blocks

namespace detail {

inline ad::Var chain_forward(const ModelConfig& c, const std::vector<BlockVars>& vars, ad::Var x) {
  for (const BlockVars& v : vars) x = block_forward(c, v, x);
  return x;
}

// Sum of squared errors of the chain over the whole set, in chunks.
inline double chain_sse(const ModelConfig& c, std::span<TransformerBlock* const> blocks, const Tensor& inputs,
                        const Tensor& targets, std::size_t chunk) {
  double sse = 0.0;
  const std::size_t n = inputs.dim(0);
  std::vector<std::size_t> idx;
  for (std::size_t r0 = 0; r0 < n; r0 += chunk) {
    idx.resize(std::min(chunk, n - r0));
    std::iota(idx.begin(), idx.end(), r0);
    Tensor x = gather_leading(inputs, idx);
    for (TransformerBlock* b : blocks) x = forward_block(c, *b, x);
    sse += squared_distance(x, gather_leading(targets, idx));
  }
  return sse;
}

}  // namespace detail

// Adam over `blocks` (consecutive, applied in order) minimizing the mean
// squared error between the chain output on `inputs` and `targets`.
inline ReconHistory reconstruct_chain(const ModelConfig& c, std::span<TransformerBlock* const> blocks,
                                      std::span<const BlockMatrices* const> masks, const Tensor& inputs,
                                      const Tensor& targets, const ReconConfig& cfg, std::size_t first_block,
                                      const std::function<void(std::uint64_t step)>& on_step = {}) {
  cfg.validate();
  if (blocks.empty() || blocks.size() != masks.size()) throw ContractError("reconstruct: blocks/masks mismatch");
  if (inputs.rank() != 3 || targets.shape() != inputs.shape()) {
    throw DimensionError("reconstruct: inputs " + shape_str(inputs.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  const std::size_t n = inputs.dim(0);
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = cfg.epochs * steps_per_epoch;

  std::vector<Tensor*> params;
  std::vector<const Tensor*> grad_masks;  // null for parameters that are never masked
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    for (auto& [name, t] : blocks[bi]->params()) {
      params.push_back(t);
      const Tensor* m = nullptr;
      for (MatrixKind k : kAllMatrices)
        if (t == &blocks[bi]->matrix(k)) m = &(*masks[bi])[matrix_index(k)];
      grad_masks.push_back(m);
    }
  }

  ReconHistory hist;
  hist.first_block = first_block;
  hist.n_blocks = blocks.size();
  try {
    hist.initial_loss =
        detail::chain_sse(c, blocks, inputs, targets, cfg.batch_size) / static_cast<double>(inputs.numel());
  } catch (const NumericalError& e) {
    throw NumericalError("reconstruct: non-finite loss at block " + std::to_string(first_block) +
                         ", step 0: " + e.what());
  }
  if (!std::isfinite(hist.initial_loss)) {
    throw NumericalError("reconstruct: non-finite loss at block " + std::to_string(first_block) + ", step 0");
  }

  AdamState state;
  state.hyper = AdamHyper{cfg.base_lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
  std::mt19937_64 rng(mix_seed(cfg.seed, first_block));
  std::vector<std::size_t> perm(n);
  std::vector<std::size_t> idx;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    double epoch_sse = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<Tensor> grads;
      try {
        ad::Graph g;
        std::vector<BlockVars> vars;
        for (TransformerBlock* b : blocks) vars.push_back(bind_block(g, *b, true));
        ad::Var out = detail::chain_forward(c, vars, g.constant(gather_leading(inputs, idx)));
        ad::Var loss = ad::mse(out, g.constant(gather_leading(targets, idx)));
        epoch_sse += static_cast<double>(g.value(loss)[0]) * static_cast<double>(g.value(out).numel());
        grads = g.backward(loss);
      } catch (const NumericalError& e) {
        throw NumericalError("reconstruct: non-finite loss at block " + std::to_string(first_block) + ", step " +
                             std::to_string(state.t + 1) + ": " + e.what());
      }
      for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grad_masks[i]) continue;
        const Tensor& m = *grad_masks[i];
        for (std::size_t j = 0; j < grads[i].numel(); ++j) grads[i][j] *= m[j];
      }
      adam_step(params, grads, state, linear_decay(state.t + 1, total_steps));
      for (Tensor* p : params) {
        if (!p->all_finite()) {
          throw NumericalError("reconstruct: parameters diverged at block " + std::to_string(first_block) +
                               ", step " + std::to_string(state.t));
        }
      }
      if (on_step) on_step(state.t);
    }
    hist.epoch_losses.push_back(epoch_sse / static_cast<double>(inputs.numel()));
  }
  return hist;
}

inline ReconHistory block_recon(const ModelConfig& c, TransformerBlock& block, const BlockMatrices& mask,
                                const Tensor& inputs, const Tensor& targets, const ReconConfig& cfg,
                                std::size_t block_index = 0, const std::function<void(std::uint64_t)>& on_step = {}) {
  TransformerBlock* bs[] = {&block};
  const BlockMatrices* ms[] = {&mask};
  return reconstruct_chain(c, bs, ms, inputs, targets, cfg, block_index, on_step);
}

// Overlapping pairs (0,1), (1,2), ..., (B-2,B-1) on dense inputs x̄_i with
// targets x̄_{i+2}. The first block of a pair is frozen once the pair is done;
// the second carries its state into the next pair.
inline std::vector<ReconHistory> cross_block_recon(const ModelConfig& c, std::vector<TransformerBlock>& blocks,
                                                   const std::vector<BlockMatrices>& masks,
                                                   const std::vector<Tensor>& dense_acts, const ReconConfig& cfg,
                                                   const PipelineHooks& hooks = {}, const Model* owner = nullptr) {
  const std::size_t nb = blocks.size();
  if (nb < 2) throw ContractError("cross_block_recon: CR needs at least 2 blocks, model has " + std::to_string(nb));
  if (masks.size() != nb || dense_acts.size() != nb + 1) throw ContractError("cross_block_recon: size mismatch");
  std::vector<ReconHistory> out;
  for (std::size_t i = 0; i + 1 < nb; ++i) {
    if (hooks.on_unit_start) hooks.on_unit_start(i, 2, dense_acts[i], dense_acts[i + 2]);
    TransformerBlock* bs[] = {&blocks[i], &blocks[i + 1]};
    const BlockMatrices* ms[] = {&masks[i], &masks[i + 1]};
    std::function<void(std::uint64_t)> step_cb;
    if (hooks.on_step && owner) step_cb = [&, i](std::uint64_t s) { hooks.on_step(*owner, i, s); };
    out.push_back(reconstruct_chain(c, bs, ms, dense_acts[i], dense_acts[i + 2], cfg, i, step_cb));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Error traces and the full pipeline

inline ErrorTrace compute_error_trace(const Model& dense, const Model& sparse, const TokenMatrix& calib,
                                      const TokenMatrix& test) {
  ErrorTrace trace;
  const std::vector<Tensor> dc = dense_activations(dense, calib);
  const std::vector<Tensor> sc = sparse_propagated_inputs(sparse, calib);
  std::vector<Tensor> dt, st;
  const bool have_test = test.rows > 0;
  if (have_test) {
    dt = dense_activations(dense, test);
    st = sparse_propagated_inputs(sparse, test);
  }
  for (std::size_t i = 0; i < dense.blocks.size(); ++i) {
    BlockError e;
    e.index = i;
    e.e_calib = normalized_block_error(dc[i + 1], sc[i + 1]);
    e.e_test = have_test ? normalized_block_error(dt[i + 1], st[i + 1]) : 0.0;
    trace.blocks.push_back(e);
  }
  const Tensor ld = head_logits(dense, dc.back());
  const Tensor ls = head_logits(sparse, sc.back());
  trace.logit_error = squared_distance(ld, ls) / static_cast<double>(ld.numel());
  return trace;
}

// GP contract: the input handed to block i must be the dense chain's x̄_i,
// bit for bit. Recomputes x̄_i from x̄_{i-1} on the dense block.
inline void check_gp_input(const Model& dense, const std::vector<Tensor>& dense_acts, std::size_t i,
                           const Tensor& input) {
  if (!input.bit_equal(dense_acts[i])) {
    throw ContractError("GP contract: block " + std::to_string(i) + " input differs from cached dense activation");
  }
  if (i > 0 && !forward_block(dense.config, dense.blocks[i - 1], dense_acts[i - 1]).bit_equal(input)) {
    throw ContractError("GP contract: cached activation for block " + std::to_string(i) +
                        " does not match the dense model");
  }
}

struct PipelineResult {
  Model sparse;
  SparsityMask mask;
  ErrorTrace trace;
  std::vector<ReconHistory> histories;
};

// Reconstructs a copy of `dense` under an already-computed mask.
inline PipelineResult reconstruct_with_mask(const Model& dense, const SparsityMask& mask, ReconMethod method,
                                            const TokenMatrix& calib, const TokenMatrix& test, const ReconConfig& cfg,
                                            const PipelineHooks& hooks = {}) {
  cfg.validate();
  if (calib.rows == 0 && method != ReconMethod::none) throw ContractError("pipeline: empty calibration set");
  PipelineResult res;
  res.mask = mask;
  res.sparse = dense;
  apply_mask(res.sparse, mask);
  const ModelConfig& c = dense.config;
  const std::size_t nb = dense.blocks.size();

  auto step_hook = [&](std::size_t first) -> std::function<void(std::uint64_t)> {
    if (!hooks.on_step) return {};
    return [&hooks, &res, first](std::uint64_t s) { hooks.on_step(res.sparse, first, s); };
  };

  switch (method) {
    case ReconMethod::none: break;
    case ReconMethod::LR: {
      Tensor x = embed(res.sparse, calib);
      std::uint64_t solves = 0;
      for (std::size_t i = 0; i < nb; ++i) {
        layer_recon_block(c, res.sparse.blocks[i], dense.blocks[i], mask.blocks[i], x, cfg.ridge_fraction, i,
                          [&](MatrixKind) {
                            if (hooks.on_step) hooks.on_step(res.sparse, i, ++solves);
                          });
        x = forward_block(c, res.sparse.blocks[i], x);
      }
      break;
    }
    case ReconMethod::BR: {
      const std::vector<Tensor> dense_acts = dense_activations(dense, calib);
      Tensor x = embed(res.sparse, calib);
      for (std::size_t i = 0; i < nb; ++i) {
        if (hooks.on_unit_start) hooks.on_unit_start(i, 1, x, dense_acts[i + 1]);
        res.histories.push_back(
            block_recon(c, res.sparse.blocks[i], mask.blocks[i], x, dense_acts[i + 1], cfg, i, step_hook(i)));
        x = forward_block(c, res.sparse.blocks[i], x);
      }
      break;
    }
    case ReconMethod::BR_GP: {
      const std::vector<Tensor> dense_acts = dense_activations(dense, calib);
      for (std::size_t i = 0; i < nb; ++i) {
        const Tensor& x = dense_acts[i];
        check_gp_input(dense, dense_acts, i, x);
        if (hooks.on_unit_start) hooks.on_unit_start(i, 1, x, dense_acts[i + 1]);
        res.histories.push_back(
            block_recon(c, res.sparse.blocks[i], mask.blocks[i], x, dense_acts[i + 1], cfg, i, step_hook(i)));
      }
      break;
    }
    case ReconMethod::BR_GP_CR: {
      const std::vector<Tensor> dense_acts = dense_activations(dense, calib);
      for (std::size_t i = 0; i + 1 < nb; ++i) check_gp_input(dense, dense_acts, i, dense_acts[i]);
      res.histories = cross_block_recon(c, res.sparse.blocks, mask.blocks, dense_acts, cfg, hooks, &res.sparse);
      break;
    }
  }

  res.trace = compute_error_trace(dense, res.sparse, calib, test);
  res.trace.method = to_string(method);
  res.trace.pruner = to_string(mask.method);
  res.trace.seed = cfg.seed;
  return res;
}

// Mask on the dense model, apply, reconstruct, measure.
inline PipelineResult run_pipeline(const Model& dense, const PrunerSpec& pruner, ReconMethod method,
                                   const TokenMatrix& calib, const TokenMatrix& test, const ReconConfig& cfg,
                                   const PipelineHooks& hooks = {}) {
  SparsityMask mask = compute_mask(dense, pruner, &calib);
  return reconstruct_with_mask(dense, mask, method, calib, test, cfg, hooks);
}

}  // namespace srlb
