#include "flat/optim.hpp"

#include <cmath>

#include "flat/error.hpp"

namespace flat {
FLAT_ABI_BEGIN

void SgdState::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0, got " + std::to_string(learning_rate));
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0, 1), got " + std::to_string(momentum));
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0, got " + std::to_string(weight_decay));
}

void zero_grads(std::span<const Parameter> params) {
  for (const Parameter& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void sgd_step(std::span<const Parameter> params, SgdState& state) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Parameter& p : params) state.velocity.emplace_back(p.tensor.numel(), Scalar{0});
  }
  if (state.velocity.size() != params.size()) {
    throw ContractError("optimizer holds " + std::to_string(state.velocity.size()) + " velocity buffers for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    if (!p.tensor.has_grad()) throw ContractError("parameter '" + p.name + "' has no gradient");
    if (state.velocity[i].size() != p.tensor.numel()) {
      throw ContractError("velocity for '" + p.name + "' does not match its shape " +
                          shape_to_string(p.tensor.shape()));
    }
  }

  const auto momentum = static_cast<Scalar>(state.momentum);
  const auto lr = static_cast<Scalar>(state.learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    const auto decay = static_cast<Scalar>(params[i].weight_decay ? state.weight_decay : 0.0);
    auto values = t.data();
    const auto grad = t.grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      v[j] = momentum * v[j] + grad[j] + decay * values[j];
      if (lr != Scalar{0}) values[j] -= lr * v[j];
    }
  }
}

double lr_at_epoch(double base_lr, int epoch, double decay_rate, int decay_every) {
  if (epoch < 0 || decay_every < 1) {
    throw ConfigError("lr_at_epoch: need epoch >= 0 and decay_every >= 1");
  }
  return base_lr * std::pow(decay_rate, epoch / decay_every);
}

FLAT_ABI_END
}  // namespace flat
