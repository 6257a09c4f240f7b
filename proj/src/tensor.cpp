#include "partleak/tensor.hpp"

#include <cmath>
#include <sstream>

namespace partleak::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tape& Tensor::tape() const {
  if (!tape_) throw ValidationError("undefined tensor");
  return *tape_;
}
const Shape& Tensor::shape() const { return tape().shape(id_); }
std::size_t Tensor::size() const { return tape().value(id_).size(); }
std::span<const double> Tensor::data() const { return tape().value(id_); }
bool Tensor::requires_grad() const { return tape().requires_grad(id_); }

double Tensor::item() const {
  auto d = data();
  if (d.size() != 1) throw ValidationError("item() on tensor of shape " + shape_str(shape()));
  return d[0];
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw ValidationError("leaf: " + std::to_string(values.size()) + " values for shape " +
                          shape_str(shape));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("leaf: non-finite value");
  }
  nodes_.push_back(Node{"leaf", std::move(shape), std::move(values), requires_grad, {}});
  grads_.emplace_back();
  return {this, nodes_.size() - 1};
}

Tensor Tape::zeros(Shape shape) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tape::full(Shape shape, double v) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, v));
}

Tensor Tape::record(const char* op, Shape shape, std::vector<double> values,
                    std::span<const Tensor> inputs, BackwardFn backward) {
  if (values.size() != numel(shape)) {
    throw ValidationError(std::string(op) + ": value/shape mismatch");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite value in forward");
  }
  bool needs = false;
  for (const auto& t : inputs) {
    if (t.defined() && &t.tape() != this) {
      throw ValidationError(std::string(op) + ": inputs from a different tape");
    }
    needs = needs || (t.defined() && requires_grad(t.node_id()));
  }
  nodes_.push_back(Node{op, std::move(shape), std::move(values), needs,
                        needs ? std::move(backward) : BackwardFn{}});
  grads_.emplace_back();
  return {this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& g = grads_[id];
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

std::vector<double> Tape::grad(const Tensor& t) const {
  const auto& g = grads_[t.node_id()];
  if (g.empty()) return std::vector<double>(nodes_[t.node_id()].value.size(), 0.0);
  return g;
}

void Tape::backward(const Tensor& loss) {
  if (&loss.tape() != this) throw ValidationError("backward: loss from a different tape");
  if (loss.size() != 1) {
    throw ValidationError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.item())) throw NumericalError("backward: loss is not finite");
  for (auto& g : grads_) g.clear();
  const std::size_t root = loss.node_id();
  grad_buffer(root)[0] = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || grads_[i].empty() || !node.backward) continue;
    node.backward(*this, i);
  }
  for (std::size_t i = 0; i <= root; ++i) {
    for (double v : grads_[i]) {
      if (!std::isfinite(v)) {
        throw NumericalError(std::string("backward: non-finite gradient at op ") + nodes_[i].op);
      }
    }
  }
}

}  // namespace partleak::ad
