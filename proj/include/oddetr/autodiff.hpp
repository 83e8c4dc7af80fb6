// SPDX-License-Identifier: Apache-2.0
//
// A small matrix-valued reverse-mode tape. Nodes hold dense Eigen matrices;
// each differentiable op records a closure that pushes its output gradient to
// its inputs. Constants (teacher parameters, anchors, features, detached
// values) never receive gradient.
//
// Stop-gradient points go through Tape::detach(). In replay mode the tape
// returns previously recorded detach values instead of recomputing them, so a
// finite-difference probe sees the same function the analytic gradient
// differentiates (matches, IoU targets and refined anchors held fixed).

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oddetr::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a tape node.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  /// With grad disabled no closures are recorded and every node is constant.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  /// A leaf that accumulates gradient.
  Var leaf(Matrix value) { return push(std::move(value), grad_enabled_, {}); }

  /// Records a differentiable op. `backward` is invoked with the node's output
  /// gradient; it is dropped when no input requires grad.
  Var op(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool any = false;
    for (const Var& v : inputs) {
      check_owner(v);
      any = any || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
    }
    return push(std::move(value), any && grad_enabled_, any && grad_enabled_ ? std::move(backward) : Backward{});
  }

  /// Stop-gradient. In replay mode returns the recorded value instead.
  Var detach(const Var& v) {
    check_owner(v);
    if (replay_) {
      if (replay_cursor_ >= frozen_.size()) throw std::logic_error("tape replay: more detach points than recorded");
      return constant(frozen_[replay_cursor_++]);
    }
    Matrix copy = v.value();
    if (record_detached_) frozen_.push_back(copy);
    return constant(std::move(copy));
  }

  /// Keep every detached value so the step can be replayed later.
  void record_detached() { record_detached_ = true; }
  std::vector<Matrix> detached_values() const { return frozen_; }

  void replay(std::vector<Matrix> frozen) {
    frozen_ = std::move(frozen);
    replay_ = true;
    replay_cursor_ = 0;
  }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient accumulated at a node (zero-sized if none reached it).
  const Matrix& grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].grad; }

  void accumulate(const Var& v, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse sweep from a 1x1 root. A tape can be swept only once.
  void backward(const Var& root) {
    check_owner(root);
    if (consumed_) throw std::logic_error("tape already consumed by a backward pass");
    consumed_ = true;
    const auto& r = nodes_[static_cast<std::size_t>(root.id())];
    if (r.value.rows() != 1 || r.value.cols() != 1) throw std::invalid_argument("backward root must be a scalar");
    if (!r.requires_grad) return;
    nodes_[static_cast<std::size_t>(root.id())].grad = Matrix::Ones(1, 1);
    for (int id = root.id(); id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
      n.backward = nullptr;
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward backward) {
    if (consumed_) throw std::logic_error("tape reused after backward");
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, std::move(backward)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  void check_owner(const Var& v) const {
    if (&v.tape() != this) throw std::logic_error("variable belongs to another tape");
  }

  bool grad_enabled_;
  bool consumed_ = false;
  bool record_detached_ = false;
  bool replay_ = false;
  std::size_t replay_cursor_ = 0;
  std::vector<Matrix> frozen_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(const Var& a, const Var& b) {
  return a.tape().op(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  return a.tape().op(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols())
    throw std::invalid_argument("add: shape mismatch");
  return a.tape().op(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

/// a + 1 * row, broadcasting a (1 x n) row over all rows of a.
inline Var add_row(const Var& a, const Var& row) {
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape().op(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

inline Var scale(const Var& a, double s) {
  return a.tape().op(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

inline Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().op(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

inline Var sigmoid(const Var& a) {
  auto out = std::make_shared<Matrix>((1.0 / (1.0 + (-a.value().array()).exp())).matrix());
  return a.tape().op(*out, {a}, [a, out](Tape& t, const Matrix& g) {
    const auto s = out->array();
    t.accumulate(a, (g.array() * s * (1.0 - s)).matrix());
  });
}

/// Row-wise softmax of (a + bias) with a constant additive bias.
inline Var softmax_rows(const Var& a, const Matrix& bias) {
  Matrix z = a.value() + bias;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - m).exp().matrix();
    z.row(i) /= z.row(i).sum();
  }
  Tape& tape = a.tape();
  if (!(a.requires_grad() && tape.grad_enabled())) return tape.constant(std::move(z));
  auto p = std::make_shared<Matrix>(z);
  return tape.op(std::move(z), {a}, [a, p](Tape& t, const Matrix& g) {
    const Matrix& s = *p;
    Matrix dot = (g.array() * s.array()).rowwise().sum().matrix();
    Matrix out = s.array() * (g.colwise() - dot.col(0)).array();
    t.accumulate(a, out);
  });
}

/// Per-row layer normalization with learnable (1 x n) gain and bias.
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Matrix& v = x.value();
  const Eigen::Index n = v.cols();
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mean = v.row(i).mean();
    const auto centered = v.row(i).array() - mean;
    const double var = centered.square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv_std(i)).matrix();
  }
  Matrix out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return x.tape().op(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std, n](Tape& t, const Matrix& g) {
    if (gain.requires_grad()) t.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
    if (bias.requires_grad()) t.accumulate(bias, g.colwise().sum());
    if (x.requires_grad()) {
      Matrix gx = g;
      gx.array().rowwise() *= gain.value().row(0).array();
      Matrix dx(gx.rows(), gx.cols());
      for (Eigen::Index i = 0; i < gx.rows(); ++i) {
        const double m1 = gx.row(i).mean();
        const double m2 = (gx.row(i).array() * xhat.row(i).array()).mean();
        dx.row(i) = (inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2)).matrix();
      }
      t.accumulate(x, dx);
    }
    (void)n;
  });
}

/// Sum of scalar (1x1) nodes; zero when empty.
inline Var sum_scalars(Tape& tape, const std::vector<Var>& terms) {
  if (terms.empty()) return tape.constant(Matrix::Zero(1, 1));
  Var acc = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) acc = add(acc, terms[k]);
  return acc;
}

/// A scalar produced by an external function of several inputs whose
/// gradients were computed alongside the value.
inline Var custom_scalar(Tape& tape, double value, std::vector<std::pair<Var, Matrix>> input_grads) {
  std::vector<Var> inputs;
  inputs.reserve(input_grads.size());
  for (const auto& [v, g] : input_grads) inputs.push_back(v);
  Matrix out(1, 1);
  out(0, 0) = value;
  auto grads = std::make_shared<std::vector<std::pair<Var, Matrix>>>(std::move(input_grads));
  return tape.op(std::move(out), inputs, [grads](Tape& t, const Matrix& g) {
    const double s = g(0, 0);
    for (const auto& [v, dg] : *grads)
      if (v.requires_grad()) t.accumulate(v, dg * s);
  });
}

}  // namespace oddetr::ad
