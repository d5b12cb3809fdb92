#pragma once

// Dense f64 tensors with a per-thread reverse-mode recording graph.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets the recording graph refer back to inputs during backward. Use clone()
// for a deep copy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vila {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::uint64_t graph_epoch = 0;  // 0 for leaves, else the epoch of the recording graph
  bool consumed = false;          // set on a loss after backward ran from it

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

struct Node {
  std::vector<ImplPtr> inputs;
  ImplPtr output;
  std::function<void(const Node&)> backward;
};

/// Ordered record of the operations of one forward pass. Nodes are appended
/// as ops execute, so every node's inputs were produced by earlier nodes or
/// are leaves.
class Graph {
 public:
  static Graph& current() {
    thread_local Graph graph;
    return graph;
  }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  void record(Node node) { nodes_.push_back(std::move(node)); }

  void clear() {
    nodes_.clear();
    ++epoch_;
  }

 private:
  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl>()) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
  }
  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::ptrdiff_t axis) const {
    auto r = static_cast<std::ptrdiff_t>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("axis out of range for shape " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
  }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient values; zeros when nothing has accumulated.
  std::vector<double> grad() const {
    if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return impl_->grad;
  }
  std::span<double> mutable_grad() { return {impl_->grad_buffer(), numel()}; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  const ImplPtr& impl() const { return impl_; }
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  ImplPtr impl_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
#ifndef NDEBUG
  for (double x : v) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
#else
  (void)v;
  (void)op;
#endif
}

inline bool all_finite(const std::vector<ImplPtr>& inputs) {
  for (const auto& in : inputs) {
    for (double x : in->data) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

/// Builds an op result and, when any input requires grad, records the node.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<ImplPtr> inputs,
                          std::function<void(const Node&)> backward, const char* op) {
#ifndef NDEBUG
  if (all_finite(inputs)) check_finite(data, op);
#else
  (void)op;
#endif
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  Tensor out(std::move(shape), std::move(data), needs);
  if (needs) {
    auto& g = Graph::current();
    out.impl()->graph_epoch = g.epoch();
    g.record(Node{std::move(inputs), out.impl(), std::move(backward)});
  }
  return out;
}

}  // namespace detail

/// Runs reverse accumulation from a scalar loss over the current graph, then
/// frees the graph. Gradients accumulate into existing grad buffers.
inline void backward(const Tensor& loss) {
  const auto& impl = loss.impl();
  if (loss.numel() != 1) {
    throw GraphError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (impl->consumed) throw GraphError("backward called twice on the same graph");
  if (!impl->requires_grad) throw GraphError("loss is not connected to any tensor requiring grad");
  auto& graph = Graph::current();
  if (impl->graph_epoch != 0 && impl->graph_epoch != graph.epoch()) {
    throw GraphError("loss belongs to a graph that was already freed");
  }
  impl->grad_buffer()[0] += 1.0;
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward(*it);
  }
  impl->consumed = true;
  graph.clear();
}

/// Drops any recorded but unused graph (e.g. after a forward pass that will
/// not be differentiated).
inline void reset_graph() { Graph::current().clear(); }

}  // namespace vila
