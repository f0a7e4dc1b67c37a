#include "distnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "distnet/error.hpp"

namespace distnet {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Config: return "config";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::State: return "state";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape) {
  if (shape.empty()) fail(ErrorKind::Shape, "tensor shape must have at least one dim");
  for (auto d : shape) {
    if (d == 0) fail(ErrorKind::Shape, "zero-sized dim in shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape_numel(shape), 0.0f);
  node->shape = std::move(shape);
  return node;
}

}  // namespace

std::span<float> detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = new_node(std::move(shape));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    fail(ErrorKind::Shape, "data length " + std::to_string(values.size()) +
                               " does not match shape " + shape_str(shape));
  }
  auto node = new_node(std::move(shape));
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    fail(ErrorKind::Shape, "axis " + std::to_string(axis) + " out of range for " +
                               shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<float> Tensor::data() { return node_->data; }
std::span<const float> Tensor::data() const { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Shape, "item() on non-scalar " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) fail(ErrorKind::Shape, "index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) fail(ErrorKind::Shape, "index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf) fail(ErrorKind::State, "requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }
std::span<float> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

bool Tensor::all_finite() const {
  return std::all_of(node_->data.begin(), node_->data.end(),
                     [](float v) { return std::isfinite(v); });
}

void Tensor::backward() {
  if (numel() != 1) fail(ErrorKind::Shape, "backward() needs a scalar, got " + shape_str(shape()));
  if (node_->consumed) {
    fail(ErrorKind::State, "backward() called twice on the same graph; run the forward pass again");
  }
  if (!node_->requires_grad) fail(ErrorKind::State, "backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        if (parent->consumed) {
          fail(ErrorKind::State, "backward() through a graph that was already released");
        }
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  for (detail::Node* node : order) {
    if (node->is_leaf) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

namespace detail {

Tensor make_result(Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto node = new_node(std::move(shape));
  node->is_leaf = false;
  if (g_grad_enabled) {
    for (const Tensor* in : inputs) {
      if (in && in->defined() && in->node()->requires_grad) {
        node->requires_grad = true;
        break;
      }
    }
    if (node->requires_grad) {
      for (const Tensor* in : inputs) {
        if (in && in->defined()) node->parents.push_back(in->node());
      }
    }
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, const std::vector<Tensor>& inputs) {
  auto node = new_node(std::move(shape));
  node->is_leaf = false;
  if (g_grad_enabled) {
    for (const Tensor& in : inputs) {
      if (in.node()->requires_grad) {
        node->requires_grad = true;
        break;
      }
    }
    if (node->requires_grad) {
      for (const Tensor& in : inputs) node->parents.push_back(in.node());
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace distnet
