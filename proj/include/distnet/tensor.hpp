#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace distnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;  // set once backward() has released this node's graph
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<float> ensure_grad();
};

}  // namespace detail

/// Handle to an n-dimensional float32 array with reverse-mode autodiff.
///
/// Copies share storage; use clone() for a deep copy. Results of operations on
/// tensors that require gradients record a backward closure. Calling
/// backward() on a scalar result propagates gradients to every reachable leaf
/// and then releases the intermediate graph, so a second backward() through
/// the same graph raises an ErrorKind::State error.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> values,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  void backward();

  /// Same values, no history, fresh storage.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  bool all_finite() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Autodiff recording is on by default; a guard disables it on the current
/// thread for its lifetime (evaluation passes).
bool grad_enabled();

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

/// Allocates the output of an op. Inputs are recorded as parents only when
/// recording is on and at least one input requires a gradient.
Tensor make_result(Shape shape, std::initializer_list<const Tensor*> inputs);
Tensor make_result(Shape shape, const std::vector<Tensor>& inputs);

inline bool tracks(const Tensor& t) { return t.node()->requires_grad; }

}  // namespace detail

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace distnet
