#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tape owns every value produced during one forward pass. Tensors are
// cheap handles (tape pointer + node id). Ops append nodes in execution
// order, so the recording order is already topological; backward() walks
// the nodes once, last to first.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace partleak {

/// Raised for malformed inputs (shape mismatch, bad config values, ...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward value or a loss becomes NaN/Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace partleak

namespace partleak::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool defined() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t node_id() const { return id_; }

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::span<const double> data() const;
  bool requires_grad() const;

  /// Value of a single-element tensor.
  double item() const;
  /// Copy of the values.
  std::vector<double> to_vector() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Called during backward with the tape and the node's own id. Reads
  /// grad(self) and accumulates into the inputs' gradient buffers.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad);
  Tensor constant(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), false);
  }
  Tensor scalar(double v) { return constant({1}, {v}); }
  Tensor zeros(Shape shape);
  Tensor full(Shape shape, double v);

  /// Appends an op result. Values are checked for NaN/Inf. The backward
  /// closure is dropped when no input requires a gradient.
  Tensor record(const char* op, Shape shape, std::vector<double> values,
                std::span<const Tensor> inputs, BackwardFn backward);
  Tensor record(const char* op, Shape shape, std::vector<double> values,
                std::initializer_list<Tensor> inputs, BackwardFn backward) {
    return record(op, std::move(shape), std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  /// Runs reverse-mode accumulation from a scalar loss. Gradients for all
  /// nodes that require them are available afterwards through grad().
  void backward(const Tensor& loss);

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  std::span<const double> value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t num_nodes() const { return nodes_.size(); }

  /// Gradient of the last backward() loss w.r.t. a node. Zeros when the
  /// node was not reached.
  std::vector<double> grad(const Tensor& t) const;
  bool has_grad(std::size_t id) const { return !grads_[id].empty(); }
  std::span<const double> grad_view(std::size_t id) const { return grads_[id]; }
  /// Lazily allocated accumulator, used by backward closures.
  std::vector<double>& grad_buffer(std::size_t id);

 private:
  struct Node {
    const char* op;
    Shape shape;
    std::vector<double> value;
    bool requires_grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

}  // namespace partleak::ad
