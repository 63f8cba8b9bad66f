#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "srlb/errors.hpp"
#include "srlb/tensor.hpp"

namespace srlb {

struct AdamHyper {
  float lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Moments for a fixed list of parameters; shapes are bound on first use.
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

// Multiplier for step `t` (1-based) of `total`: 1 on the first step, 0 on the last.
inline float linear_decay(std::uint64_t t, std::uint64_t total) {
  if (total <= 1) return 1.0f;
  return 1.0f - static_cast<float>(t - 1) / static_cast<float>(total - 1);
}

// One bias-corrected Adam update, no weight decay and no clipping.
// Effective learning rate is hyper.lr * lr_factor.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      float lr_factor = 1.0f) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params/grads count mismatch");
  if (state.hyper.lr < 0.0f || lr_factor < 0.0f) throw ContractError("adam_step: negative learning rate");
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.push_back(Tensor::zeros(p->shape()));
      state.v.push_back(Tensor::zeros(p->shape()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state bound to a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.m[i].shape()) {
      throw ContractError("adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                          shape_str(params[i]->shape()) + " vs grad " + shape_str(grads[i].shape()));
    }
  }

  state.t += 1;
  const AdamHyper& h = state.hyper;
  const double bc1 = 1.0 - std::pow(static_cast<double>(h.beta1), static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(h.beta2), static_cast<double>(state.t));
  const float step = h.lr * lr_factor;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0f - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0f - h.beta2) * g[j] * g[j];
      const float mhat = static_cast<float>(m[j] / bc1);
      const float vhat = static_cast<float>(v[j] / bc2);
      p[j] -= step * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

}  // namespace srlb
