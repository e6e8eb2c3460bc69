#include "xkt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "xkt/errors.hpp"

namespace xkt {

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<real> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor data has " + std::to_string(values.size()) +
                         " entries but shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

const std::vector<real>& empty_values() {
  static const std::vector<real> kEmpty;
  return kEmpty;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<real>& detail::Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), real(0));
  return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<real> values) {
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), real(0)); }

Tensor Tensor::full(Shape shape, real value) {
  auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<real>(n, value));
}

Tensor Tensor::scalar(real value) { return constant({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<real> values) {
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = true;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  static const Shape kNone;
  return node_ ? node_->shape : kNone;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_ || node_->leaf; }
const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

std::span<const real> Tensor::data() const {
  return node_ ? std::span<const real>(node_->value) : std::span<const real>(empty_values());
}

std::span<real> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->value;
}

std::vector<real> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

std::span<const real> Tensor::grad() const {
  if (!node_) return {};
  return node_->ensure_grad();
}

std::span<real> Tensor::mutable_grad() {
  if (!node_) return {};
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), real(0));
}

real Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() needs a single-element tensor, got " + shape_string(shape()));
  }
  return node_->value[0];
}

real Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " does not match " +
                         shape_string(shape()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw DimensionError("index out of range for " + shape_string(shape()));
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor detail::make_result(const char* op, Shape shape, std::vector<real> values,
                           std::vector<Tensor> inputs, std::function<void(Node&)> grad_fn) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                         std::to_string(i));
    }
  }
  auto node = new_node(std::move(shape), std::move(values));
  node->op = op;
  node->leaf = false;
  if (!t_grad_enabled) return Tensor(std::move(node));
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(grad_fn);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<std::shared_ptr<detail::Node>> order;
  {
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::shared_ptr<detail::Node>> stack{loss.node()};
    while (!stack.empty()) {
      auto n = std::move(stack.back());
      stack.pop_back();
      if (!visited.insert(n.get()).second) continue;
      for (auto& in : n->inputs) {
        if (in->requires_grad) stack.push_back(in);
      }
      order.push_back(std::move(n));
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  for (auto& n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), real(0));
  }
  loss.node()->ensure_grad()[0] += real(1);

  for (auto& n : order) {
    if (n->leaf) continue;
    if (n->backward) n->backward(*n);
    n->backward = nullptr;
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  // `order` keeps every node alive, so edges can be dropped in any order
  // without recursive destruction of long chains.
  for (auto& n : order) {
    if (!n->leaf) n->inputs.clear();
  }
}

}  // namespace xkt
