#pragma once

#include <span>
#include <string>
#include <vector>

#include "flat/tensor.hpp"

namespace flat {
FLAT_ABI_BEGIN

/// A named learnable tensor. Copies alias the same storage.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool weight_decay = true;
};

/// SGD with momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - learning_rate * v
struct SgdState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epoch = 0;
  /// One buffer per parameter, in the order passed to sgd_step.
  std::vector<std::vector<Scalar>> velocity;

  /// Throws ConfigError unless lr > 0, 0 <= momentum < 1, weight_decay >= 0.
  void validate() const;
};

/// Allocates and zero-fills every parameter's gradient.
void zero_grads(std::span<const Parameter> params);

/// Throws ContractError if a parameter has no gradient buffer or if the
/// velocity buffers do not line up with the parameters.
void sgd_step(std::span<const Parameter> params, SgdState& state);

/// base_lr * decay_rate ^ floor(epoch / decay_every)
double lr_at_epoch(double base_lr, int epoch, double decay_rate, int decay_every);

FLAT_ABI_END
}  // namespace flat
