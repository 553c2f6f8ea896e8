#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "ood/errors.hpp"

// Reverse-mode automatic differentiation on dense f64 tensors, sized for
// small MLPs. A Tape owns every node created through it; Tensor is a cheap
// handle (tape pointer + node index) that stays valid while the tape lives.
//
// Recording an op stores a backward closure. backward(loss) seeds d(loss)
// with 1 and replays the closures in reverse recording order, which is a
// valid topological order by construction. Gradients accumulate across
// backward calls until zero_grad().
//
// Elementwise binary ops require equal shapes or a one-element operand
// (scalar broadcast); nothing broadcasts beyond that.
namespace ood::autodiff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);

class Tape;

class Tensor {
public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  bool requires_grad() const;
  std::span<const double> values() const;
  // Value of a one-element tensor.
  double value() const;
  // Accumulated gradient; UsageError if the tensor does not require grad.
  std::span<const double> grad() const;

private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
  Tensor scalar(double value, bool requires_grad = false);
  Tensor zeros(Shape shape, bool requires_grad = false);

  // Elementwise; shapes must match or either operand must have one element.
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);

  Tensor neg(Tensor t);
  Tensor relu(Tensor t);
  // ValueError if any result would overflow to infinity.
  Tensor exp(Tensor t);
  // ValueError on non-positive input.
  Tensor log(Tensor t);
  // alpha must be finite.
  Tensor scale(Tensor t, double alpha);
  Tensor add_scalar(Tensor t, double c);

  // a: [m x k], b: [k x n] -> [m x n].
  Tensor matmul(Tensor a, Tensor b);
  // m: [r x c] plus v (c elements) added to every row.
  Tensor add_rowvec(Tensor m, Tensor v);

  // Row-wise softmax of logits / tau; a 1-D tensor is one row. tau > 0.
  Tensor softmax(Tensor logits, double tau);

  // Sum of all elements -> one-element tensor.
  Tensor sum(Tensor t);
  // [r x c] -> [r], each entry the sum of a row.
  Tensor sum_rows(Tensor m);
  // [r x c] -> [r], each entry the max of a row; the subgradient flows to
  // the first maximal entry.
  Tensor row_max(Tensor m);
  // k tensors of shape [r] -> [r x k].
  Tensor hstack(const std::vector<Tensor>& cols);

  // Inverted dropout: keeps each element with probability 1-p and scales by
  // 1/(1-p). p in [0, 1); p == 0 returns the input tensor unchanged.
  Tensor dropout(Tensor t, double p, std::mt19937_64& rng);

  // Mean over the batch of -log softmax(logits)[label]. Fused and
  // log-sum-exp stabilized. logits: [b x c], labels in [0, c).
  Tensor cross_entropy_with_logits(Tensor logits, const std::vector<int>& labels);

  // Mean over rows of the summed binary cross-entropy between probs (in
  // (0, 1], clamped away from 0 and 1 internally) and targets.
  Tensor bce_mean(Tensor probs, const std::vector<double>& targets);

  // loss must have exactly one element.
  void backward(Tensor loss);
  void zero_grad();

  std::size_t node_count() const { return nodes_.size(); }

private:
  friend class Tensor;

  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // lazily sized
    bool requires_grad = false;
  };

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  // Persistent gradient buffer of a node, allocated (zeroed) on first use.
  std::vector<double>& grad_buf(std::size_t id);
  // Scratch adjoint of a node for the backward pass in flight. Kept separate
  // from grad so repeated backward calls accumulate linearly.
  std::vector<double>& adj_buf(std::size_t id);
  // Adjoint of a node if it was written this pass, else nullptr.
  const std::vector<double>* adj_in(std::size_t id) const;

  Tensor make_node(Shape shape, std::vector<double> values, bool requires_grad);
  void record(std::function<void()> backprop);
  void check_owned(Tensor t, const char* op) const;
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> records_;
  std::vector<std::vector<double>> adj_;
};

} // namespace ood::autodiff
