#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// Every op result keeps shared ownership of the inputs it needs for the
// chain rule. Creation order is recorded with a monotone sequence number,
// which is a valid topological order of the graph; backward() replays it in
// reverse so gradient accumulation order is fixed.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xkt {

#ifdef XKT_FLOAT32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // sized on first use
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<real>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<real> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, real value);
  static Tensor scalar(real value);
  /// Leaf that receives gradients.
  static Tensor parameter(Shape shape, std::vector<real> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  bool requires_grad() const;
  bool is_leaf() const;
  const char* op_name() const;

  std::span<const real> data() const;
  /// Direct write access. Only meaningful for leaves (optimizer updates, tests).
  std::span<real> mutable_data();
  std::vector<real> to_vector() const;

  /// Accumulated gradient; all zeros if backward never reached this tensor.
  std::span<const real> grad() const;
  std::span<real> mutable_grad();
  void zero_grad();

  real item() const;
  real at(std::initializer_list<std::size_t> index) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse pass from a scalar loss. Leaves accumulate into their grad;
/// interior nodes are released once their contribution is pushed.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables recording for the lifetime of the guard (evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Builds an op result. Checks finiteness of `values`; records `grad_fn` only
/// when recording is on and some input requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<real> values,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> grad_fn);

}  // namespace detail

}  // namespace xkt
