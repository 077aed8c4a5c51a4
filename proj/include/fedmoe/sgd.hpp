#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/tensor.hpp"

namespace fedmoe {

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double lr_decay_factor = 1.0;
  std::size_t lr_decay_every = 0;  // epochs; 0 disables decay

  /// Throws ConfigError naming `path` and the offending field.
  void validate(const std::string& path = "sgd") const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError(path + ".learning_rate must be > 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError(path + ".momentum must be in [0,1)");
    }
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
      throw ConfigError(path + ".weight_decay must be >= 0");
    }
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
      throw ConfigError(path + ".lr_decay_factor must be in (0,1]");
    }
  }

  /// Step size in effect during `epoch` (0-based).
  double lr_at(std::size_t epoch) const {
    if (lr_decay_every == 0) return learning_rate;
    return learning_rate *
           std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_every));
  }
};

/// Momentum buffers, one per parameter tensor, plus the epoch used for decay.
struct OptimizerState {
  std::vector<Tensor> velocity;
  std::size_t epoch = 0;
};

/// v <- m*v + (grad + wd*param);  param <- param - lr(epoch)*v.
/// Buffers are created lazily (zero) on the first step.
inline void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads,
                     OptimizerState& state, const SgdConfig& cfg) {
  if (params.size() != grads.size()) {
    throw DimensionError("sgd_step: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Tensor& p : params) state.velocity.emplace_back(p.shape());
  }
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: optimizer state tracks " +
                         std::to_string(state.velocity.size()) + " tensors, got " +
                         std::to_string(params.size()));
  }
  const double lr = cfg.lr_at(state.epoch);
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    Tensor& v = state.velocity[t];
    require_same_shape(p, grads[t], "sgd_step");
    require_same_shape(p, v, "sgd_step state");
    const Tensor& g = grads[t];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      v[i] = cfg.momentum * v[i] + (g[i] + cfg.weight_decay * p[i]);
      p[i] -= lr * v[i];
    }
    require_finite(p, "sgd_step");
  }
}

}  // namespace fedmoe
