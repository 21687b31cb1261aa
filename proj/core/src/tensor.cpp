#include "flat/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "flat/error.hpp"

namespace flat {
FLAT_ABI_BEGIN

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

const std::string kLeafName = "leaf";

detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw ContractError("operation on an undefined tensor");
  return *node;
}

}  // namespace

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->op = kLeafName;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const Scalar> Tensor::data() const { return checked(node_).value; }
std::span<Scalar> Tensor::data() { return checked(node_).value; }

Scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  checked(node_).requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const Scalar> Tensor::grad() const { return checked(node_).grad; }
std::span<Scalar> Tensor::grad() { return checked(node_).grad; }

void Tensor::zero_grad() {
  auto& n = checked(node_);
  n.grad.assign(n.value.size(), Scalar{0});
}

const std::string& Tensor::op() const { return checked(node_).op; }

std::vector<Tensor> Tensor::inputs() const {
  std::vector<Tensor> out;
  for (const auto& in : checked(node_).inputs) out.emplace_back(in);
  return out;
}

bool Tensor::is_leaf() const { return checked(node_).inputs.empty(); }

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

Tensor Tensor::clone() const {
  Tensor copy(shape(), node_->value, node_->requires_grad);
  copy.node_->grad = node_->grad;
  return copy;
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined()) return tape;
  // Iterative post-order DFS so deep graphs cannot overflow the stack.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.emplace_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward on a tensor that is not recorded on the tape");

  const Tape tape = Tape::record(loss);
  for (const Tensor& t : tape.nodes()) {
    auto& node = *t.node();
    if (!node.requires_grad) continue;
    if (node.inputs.empty()) {
      if (node.grad.empty()) node.grad.assign(node.value.size(), Scalar{0});
    } else {
      node.grad.assign(node.value.size(), Scalar{0});
    }
  }
  loss.node()->grad[0] += Scalar{1};

  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto& node = *it->node();
    if (node.requires_grad && node.backward) node.backward(node);
  }
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool value) { g_grad_enabled = value; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

FLAT_ABI_END
}  // namespace flat
