#pragma once

// Matrix-granular reverse-mode differentiation. Every op records its output
// value and a backward closure on a Tape; nodes are appended after their
// inputs, so the recording order is already a topological order and backward
// is a single reverse sweep.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "circuit_probe/errors.hpp"
#include "circuit_probe/tensor_math.hpp"

namespace circuit_probe::ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(const Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const { return id_; }
  const Tape<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  const MatrixX<Scalar>& value() const { return tape_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  const Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
struct BackwardContext {
  std::span<const MatrixX<Scalar>* const> inputs;
  const MatrixX<Scalar>& output;
  const MatrixX<Scalar>& grad_output;
  // One accumulator per input; nullptr when that input needs no gradient. An
  // accumulator of size zero has not received a contribution yet.
  std::span<MatrixX<Scalar>* const> grad_inputs;
};

template <typename Scalar, typename Expr>
void accumulate(MatrixX<Scalar>* acc, const Expr& contribution) {
  if (acc == nullptr) return;
  if (acc->size() == 0) {
    *acc = contribution;
  } else {
    *acc += contribution;
  }
}

template <typename Scalar>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<MatrixX<Scalar>> grads) : grads_(std::move(grads)) {}

  /// Gradient of the loss with respect to `v`. Variables the loss does not
  /// depend on get a zero matrix of their own shape.
  MatrixX<Scalar> operator[](const Var<Scalar>& v) const {
    const auto& g = grads_.at(v.id());
    if (g.size() == 0) return MatrixX<Scalar>::Zero(v.rows(), v.cols());
    return g;
  }

  bool reached(const Var<Scalar>& v) const { return grads_.at(v.id()).size() != 0; }

 private:
  std::vector<MatrixX<Scalar>> grads_;
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = MatrixX<Scalar>;
  using BackwardFn = std::function<void(const BackwardContext<Scalar>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf owning its value.
  Var<Scalar> variable(Matrix value) { return push(std::move(value), nullptr, true); }

  Var<Scalar> constant(Matrix value) { return push(std::move(value), nullptr, false); }

  /// Leaf that refers to caller-owned storage; `value` must outlive the tape.
  Var<Scalar> bind(const Matrix& value, bool requires_grad) {
    return push(Matrix(), &value, requires_grad);
  }

  Var<Scalar> record(Matrix value, std::vector<Var<Scalar>> inputs, BackwardFn backward) {
    bool needs_grad = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape() != this) throw ContractError("autodiff: input recorded on a different tape");
      ids.push_back(in.id());
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    auto v = push(std::move(value), nullptr, needs_grad);
    nodes_.back().inputs = std::move(ids);
    nodes_.back().backward = std::move(backward);
    return v;
  }

  const Matrix& value(const Var<Scalar>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.borrowed ? *n.borrowed : n.owned;
  }

  bool requires_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 loss. `visit`, when set, is called with the id
  /// of every op node whose backward closure runs.
  Gradients<Scalar> backward(const Var<Scalar>& loss,
                             const std::function<void(std::size_t)>& visit = {}) const {
    if (loss.tape() != this) throw ContractError("backward: loss recorded on a different tape");
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward: loss must be a scalar, got " + shape_string(lv));
    }
    std::vector<Matrix> grads(nodes_.size());
    grads[loss.id()] = Matrix::Ones(1, 1);
    std::vector<const Matrix*> inputs;
    std::vector<Matrix*> grad_inputs;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.backward || !node.requires_grad || grads[i].size() == 0) continue;
      inputs.clear();
      grad_inputs.clear();
      for (std::size_t in : node.inputs) {
        const Node& src = nodes_[in];
        inputs.push_back(src.borrowed ? src.borrowed : &src.owned);
        grad_inputs.push_back(src.requires_grad ? &grads[in] : nullptr);
      }
      BackwardContext<Scalar> ctx{inputs, node.borrowed ? *node.borrowed : node.owned, grads[i], grad_inputs};
      node.backward(ctx);
      if (visit) visit(i);
    }
    return Gradients<Scalar>(std::move(grads));
  }

 private:
  struct Node {
    Matrix owned;
    const Matrix* borrowed = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var<Scalar> push(Matrix value, const Matrix* borrowed, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.borrowed = borrowed;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // stable references across appends
};

namespace detail {
template <typename Scalar>
Tape<Scalar>& tape_of(const Var<Scalar>& v) {
  // Ops append to the tape their inputs live on.
  return const_cast<Tape<Scalar>&>(*v.tape());
}

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  }
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto out = circuit_probe::matmul(a.value(), b.value());
  return detail::tape_of(a).record(std::move(out), {a, b}, [](const BackwardContext<Scalar>& c) {
    if (c.grad_inputs[0]) accumulate(c.grad_inputs[0], c.grad_output * c.inputs[1]->transpose());
    if (c.grad_inputs[1]) accumulate(c.grad_inputs[1], c.inputs[0]->transpose() * c.grad_output);
  });
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto out = circuit_probe::matmul_nt(a.value(), b.value());
  return detail::tape_of(a).record(std::move(out), {a, b}, [](const BackwardContext<Scalar>& c) {
    if (c.grad_inputs[0]) accumulate(c.grad_inputs[0], c.grad_output * *c.inputs[1]);
    if (c.grad_inputs[1]) accumulate(c.grad_inputs[1], c.grad_output.transpose() * *c.inputs[0]);
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("add", a, b);
  MatrixX<Scalar> out = a.value() + b.value();
  return detail::tape_of(a).record(std::move(out), {a, b}, [](const BackwardContext<Scalar>& c) {
    accumulate(c.grad_inputs[0], c.grad_output);
    accumulate(c.grad_inputs[1], c.grad_output);
  });
}

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("hadamard", a, b);
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::tape_of(a).record(std::move(out), {a, b}, [](const BackwardContext<Scalar>& c) {
    if (c.grad_inputs[0]) accumulate(c.grad_inputs[0], c.grad_output.cwiseProduct(*c.inputs[1]));
    if (c.grad_inputs[1]) accumulate(c.grad_inputs[1], c.grad_output.cwiseProduct(*c.inputs[0]));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  MatrixX<Scalar> out = a.value() * s;
  return detail::tape_of(a).record(std::move(out), {a}, [s](const BackwardContext<Scalar>& c) {
    accumulate(c.grad_inputs[0], c.grad_output * s);
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::tape_of(a).record(std::move(out), {a}, [](const BackwardContext<Scalar>& c) {
    const auto& in = *c.inputs[0];
    accumulate(c.grad_inputs[0], MatrixX<Scalar>::Constant(in.rows(), in.cols(), c.grad_output(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& a) {
  auto out = circuit_probe::silu(a.value());
  return detail::tape_of(a).record(std::move(out), {a}, [](const BackwardContext<Scalar>& c) {
    if (!c.grad_inputs[0]) return;
    MatrixX<Scalar> d = c.inputs[0]->unaryExpr([](Scalar x) { return silu_derivative(x); });
    accumulate(c.grad_inputs[0], c.grad_output.cwiseProduct(d));
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  auto out = circuit_probe::gelu(a.value());
  return detail::tape_of(a).record(std::move(out), {a}, [](const BackwardContext<Scalar>& c) {
    if (!c.grad_inputs[0]) return;
    MatrixX<Scalar> d = c.inputs[0]->unaryExpr([](Scalar x) { return gelu_derivative(x); });
    accumulate(c.grad_inputs[0], c.grad_output.cwiseProduct(d));
  });
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  auto out = circuit_probe::softmax_rows(a.value());
  return detail::tape_of(a).record(std::move(out), {a}, [](const BackwardContext<Scalar>& c) {
    if (!c.grad_inputs[0]) return;
    const auto& y = c.output;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = c.grad_output.cwiseProduct(y).rowwise().sum();
    MatrixX<Scalar> g = y.cwiseProduct(c.grad_output - dot.replicate(1, y.cols()));
    accumulate(c.grad_inputs[0], g);
  });
}

/// Row-wise RMS normalization with a learned 1 x cols gain.
template <typename Scalar>
Var<Scalar> rmsnorm_rows(const Var<Scalar>& x, const Var<Scalar>& gain) {
  if (gain.rows() != 1) throw ShapeError("rmsnorm: gain must be a single row");
  auto out = circuit_probe::rmsnorm_rows(x.value(), gain.value());
  return detail::tape_of(x).record(std::move(out), {x, gain}, [](const BackwardContext<Scalar>& c) {
    const auto& in = *c.inputs[0];
    const auto& g = *c.inputs[1];
    const Scalar d = static_cast<Scalar>(in.cols());
    MatrixX<Scalar> gx(in.rows(), in.cols());
    MatrixX<Scalar> ggain = MatrixX<Scalar>::Zero(1, in.cols());
    for (Index i = 0; i < in.rows(); ++i) {
      const Scalar inv_rms = Scalar(1) / std::sqrt(in.row(i).squaredNorm() / d + static_cast<Scalar>(kRmsNormEps));
      ggain += (c.grad_output.row(i).cwiseProduct(in.row(i)) * inv_rms);
      auto scaled = c.grad_output.row(i).cwiseProduct(g.reshaped().transpose());
      const Scalar proj = scaled.dot(in.row(i));
      gx.row(i) = scaled * inv_rms - in.row(i) * (inv_rms * inv_rms * inv_rms * proj / d);
    }
    if (c.grad_inputs[0]) accumulate(c.grad_inputs[0], gx);
    if (c.grad_inputs[1]) accumulate(c.grad_inputs[1], ggain);
  });
}

template <typename Scalar>
Var<Scalar> rope(const Var<Scalar>& x, Index n_heads, double base) {
  MatrixX<Scalar> out = x.value();
  apply_rope(out, n_heads, 0, base);
  return detail::tape_of(x).record(std::move(out), {x}, [n_heads, base](const BackwardContext<Scalar>& c) {
    if (!c.grad_inputs[0]) return;
    MatrixX<Scalar> g = c.grad_output;
    apply_rope(g, n_heads, 0, base, /*inverse=*/true);
    accumulate(c.grad_inputs[0], g);
  });
}

/// Fused multi-head causal self-attention over a full sequence.
template <typename Scalar>
Var<Scalar> causal_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                             Index n_heads) {
  std::vector<MatrixX<Scalar>> probs;
  auto out = circuit_probe::causal_attention(q.value(), k.value(), v.value(), n_heads, 0, &probs);
  return detail::tape_of(q).record(
      std::move(out), {q, k, v}, [n_heads, probs = std::move(probs)](const BackwardContext<Scalar>& c) {
        const auto& qm = *c.inputs[0];
        const auto& km = *c.inputs[1];
        const auto& vm = *c.inputs[2];
        const Index head_dim = qm.cols() / n_heads;
        const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
        MatrixX<Scalar> gq = MatrixX<Scalar>::Zero(qm.rows(), qm.cols());
        MatrixX<Scalar> gk = MatrixX<Scalar>::Zero(km.rows(), km.cols());
        MatrixX<Scalar> gv = MatrixX<Scalar>::Zero(vm.rows(), vm.cols());
        for (Index h = 0; h < n_heads; ++h) {
          const auto& p = probs[static_cast<std::size_t>(h)];
          const auto go = c.grad_output.middleCols(h * head_dim, head_dim);
          gv.middleCols(h * head_dim, head_dim).noalias() = p.transpose() * go;
          MatrixX<Scalar> gp = go * vm.middleCols(h * head_dim, head_dim).transpose();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = gp.cwiseProduct(p).rowwise().sum();
          MatrixX<Scalar> gs = p.cwiseProduct(gp - dot.replicate(1, p.cols())) * s;
          gq.middleCols(h * head_dim, head_dim).noalias() = gs * km.middleCols(h * head_dim, head_dim);
          gk.middleCols(h * head_dim, head_dim).noalias() = gs.transpose() * qm.middleCols(h * head_dim, head_dim);
        }
        accumulate(c.grad_inputs[0], gq);
        accumulate(c.grad_inputs[1], gk);
        accumulate(c.grad_inputs[2], gv);
      });
}

/// Row lookup: out.row(i) = table.row(ids[i]).
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& table, std::vector<Index> ids) {
  const auto& t = table.value();
  MatrixX<Scalar> out(static_cast<Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw ContractError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = t.row(ids[i]);
  }
  return detail::tape_of(table).record(std::move(out), {table}, [ids = std::move(ids)](const BackwardContext<Scalar>& c) {
    if (!c.grad_inputs[0]) return;
    MatrixX<Scalar> g = MatrixX<Scalar>::Zero(c.inputs[0]->rows(), c.inputs[0]->cols());
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += c.grad_output.row(static_cast<Index>(i));
    accumulate(c.grad_inputs[0], g);
  });
}

/// Mean next-token cross-entropy over the rows where `mask` is set. Row i of
/// `logits` is scored against `targets[i]`.
template <typename Scalar>
Var<Scalar> masked_cross_entropy(const Var<Scalar>& logits, std::vector<Index> targets,
                                 std::vector<bool> mask) {
  const auto& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows() || mask.size() != targets.size()) {
    throw ShapeError("cross_entropy: targets/mask do not match logits " + shape_string(z));
  }
  std::size_t active = 0;
  for (bool m : mask) active += m ? 1 : 0;
  if (active == 0) throw ContractError("cross_entropy: no positions selected by the loss mask");

  MatrixX<Scalar> probs(z.rows(), z.cols());
  Scalar total = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const Index t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= z.cols()) throw ContractError("cross_entropy: target out of range");
    const Scalar mx = z.row(i).maxCoeff();
    const Scalar lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    total += lse - z(i, t);
    probs.row(i) = (z.row(i).array() - lse).exp().matrix();
  }
  flush_subnormals(probs);
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(active);
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = total * inv_n;
  return detail::tape_of(logits).record(
      std::move(out), {logits},
      [targets = std::move(targets), mask = std::move(mask), probs = std::move(probs), inv_n](
          const BackwardContext<Scalar>& c) {
        if (!c.grad_inputs[0]) return;
        MatrixX<Scalar> g = MatrixX<Scalar>::Zero(probs.rows(), probs.cols());
        const Scalar go = c.grad_output(0, 0) * inv_n;
        for (Index i = 0; i < g.rows(); ++i) {
          if (!mask[static_cast<std::size_t>(i)]) continue;
          g.row(i) = probs.row(i) * go;
          g(i, targets[static_cast<std::size_t>(i)]) -= go;
        }
        accumulate(c.grad_inputs[0], g);
      });
}

}  // namespace circuit_probe::ad
