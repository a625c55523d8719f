#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace traice3d {

using Index = std::int64_t;
using Shape = std::vector<Index>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf from its inputs.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GraphError : std::logic_error {
  using std::logic_error::logic_error;
};

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float tensor with an optional gradient buffer.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<float> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<float>(values), requires_grad) {}

  static Tensor scalar(float value);
  static Tensor full(Shape shape, float value);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  Index dim(int axis) const;
  Index numel() const;

  float* data();
  const float* data() const;
  std::span<float> values();
  std::span<const float> values() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const float> grad() const;
  /// Grad buffer, allocated (zeroed) on first access.
  std::span<float> grad_mut();
  void zero_grad();
  void clear_grad();

  Tensor detach() const;
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

/// Tape of executed ops, replayed in reverse by backward().
class Graph {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, std::vector<Tensor> inputs, BackwardFn fn);
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  friend void backward(const Tensor& loss, Graph& graph);
  struct Node {
    Tensor output;
    std::vector<Tensor> inputs;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Makes `graph` the recording target for ops on this thread until destroyed.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

/// Populates grads of every requires_grad tensor reachable from `loss`.
/// Grads accumulate into existing buffers. A graph can be replayed once.
void backward(const Tensor& loss, Graph& graph);

}  // namespace traice3d
