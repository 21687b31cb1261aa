#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// The double-precision build lives in its own inline namespace so both
// builds can be linked into one program.
#ifdef FLAT_SCALAR_DOUBLE
#define FLAT_ABI_BEGIN inline namespace f64 {
#else
#define FLAT_ABI_BEGIN inline namespace f32 {
#endif
#define FLAT_ABI_END }

namespace flat {
FLAT_ABI_BEGIN

#ifdef FLAT_SCALAR_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until first touched by backward/zero_grad
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
};

}  // namespace detail

/// Dense row-major array participating in reverse-mode differentiation.
///
/// A Tensor is a handle: copies share storage and graph position. Use
/// clone() for an independent deep copy. Operations in ops.hpp record a
/// backward closure on their result whenever gradient recording is enabled
/// on the current thread and at least one input requires a gradient.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const Scalar> data() const;
  std::span<Scalar> data();
  Scalar item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const Scalar> grad() const;
  std::span<Scalar> grad();
  /// Allocates (if needed) and zero-fills the gradient buffer.
  void zero_grad();

  /// Name of the producing operation, "leaf" for user-created tensors.
  const std::string& op() const;
  std::vector<Tensor> inputs() const;
  bool is_leaf() const;

  /// Fresh leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  /// Deep copy of values, gradient-recording flag and gradient buffer.
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: used by the op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of every node reachable from a root.
/// Each node appears once and after all of its inputs.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Tensor>& nodes() const { return nodes_; }

 private:
  std::vector<Tensor> nodes_;
};

/// Populates gradients of every tensor reachable from `loss`.
///
/// Leaf gradients accumulate across calls; callers reset them before each
/// optimisation step. Intermediate gradients are recomputed on every call.
/// Throws ContractError unless `loss` is a single-element tensor that
/// requires a gradient.
void backward(const Tensor& loss);

/// Thread-local switch for gradient recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool value);
};

/// Disables gradient recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

FLAT_ABI_END
}  // namespace flat
