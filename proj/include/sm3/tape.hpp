#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include "sm3/errors.hpp"
#include "sm3/tensor.hpp"

namespace sm3 {

/// A learnable matrix. `grad` is valid only while `has_grad` is set; the
/// optimizer skips parameters that received no gradient in a step.
struct Parameter {
  Matrix value;
  Matrix grad;
  bool has_grad = false;
  bool trainable = true;

  Parameter() = default;
  Parameter(Eigen::Index rows, Eigen::Index cols)
      : value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() {
    grad.setZero(value.rows(), value.cols());
    has_grad = false;
  }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double item() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode differentiation over an explicitly recorded list of nodes.
/// Nodes are appended in evaluation order, so walking the list backwards
/// visits every node after all of its consumers.
class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into inputs.
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);

  /// Leaf bound to `p`. Repeated calls with the same parameter return the
  /// same node. Frozen parameters (trainable == false) enter as constants.
  Var parameter(Parameter& p);

  /// Appends an op result. `backward` is dropped when no input needs a
  /// gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward);

  /// Seeds d(root)/d(root) = 1 and propagates; gradients of parameter leaves
  /// are added into Parameter::grad.
  void backward(Var root);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.grad_ready) {
      n.grad = g;
      n.grad_ready = true;
    } else {
      n.grad += g;
    }
  }
  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    accumulate(v.id(), g);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool grad_ready = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  Var append(Node node);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> leaves_;
};

}  // namespace sm3
