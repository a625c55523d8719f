#include "traice3d/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace traice3d {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_string(shape));
    n *= e;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Storage>()) {
  impl_->values.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : impl_(std::make_shared<Storage>()) {
  if (static_cast<Index>(values.size()) != shape_numel(shape))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_string(shape));
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

Tensor Tensor::full(Shape shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

Index Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis out of range for " + shape_string(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

Index Tensor::numel() const { return static_cast<Index>(impl_->values.size()); }
float* Tensor::data() { return impl_->values.data(); }
const float* Tensor::data() const { return impl_->values.data(); }
std::span<float> Tensor::values() { return impl_->values; }
std::span<const float> Tensor::values() const { return impl_->values; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl_->grad; }

std::span<float> Tensor::grad_mut() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->values, false); }

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->values, impl_->requires_grad);
  return t;
}

void Graph::record(Tensor output, std::vector<Tensor> inputs, BackwardFn fn) {
  if (consumed_) throw GraphError("recording into a graph that was already replayed");
  nodes_.push_back(Node{std::move(output), std::move(inputs), std::move(fn)});
}

namespace {
thread_local Graph* current_graph = nullptr;
}

GraphScope::GraphScope(Graph& graph) : previous_(current_graph) { current_graph = &graph; }
GraphScope::~GraphScope() { current_graph = previous_; }
Graph* active_graph() { return current_graph; }

void backward(const Tensor& loss, Graph& graph) {
  if (graph.consumed_) throw GraphError("backward on a consumed graph; record a new forward pass");
  if (!loss.defined() || loss.numel() != 1)
    throw GraphError("backward requires a scalar loss");
  if (!loss.requires_grad()) throw GraphError("loss does not depend on any trainable tensor");
  graph.consumed_ = true;
  Tensor root = loss;
  root.grad_mut()[0] += 1.0f;
  for (auto it = graph.nodes_.rbegin(); it != graph.nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->fn();
  }
  // Drop intermediate grads and closures; parameter grads stay on the leaves.
  for (auto& node : graph.nodes_) {
    if (!node.output.same_storage(loss)) node.output.clear_grad();
  }
  graph.nodes_.clear();
}

}  // namespace traice3d
