#include "sm3/tape.hpp"

namespace sm3 {

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("item() requires a 1x1 value");
  return v(0, 0);
}

Var Tape::append(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return append(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  if (auto it = leaves_.find(&p); it != leaves_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  n.param = p.trainable ? &p : nullptr;
  Var v = append(std::move(n));
  leaves_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error("op inputs belong to a different tape");
    if (nodes_[in.id()].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return append(std::move(n));
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw Error("backward root belongs to a different tape");
  if (nodes_[root.id()].value.size() != 1) throw ShapeError("backward root must be 1x1");
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad_ready) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (!p.has_grad || p.grad.rows() != n.grad.rows() || p.grad.cols() != n.grad.cols()) {
        p.grad = n.grad;
      } else {
        p.grad += n.grad;
      }
      p.has_grad = true;
    }
  }
}

}  // namespace sm3
