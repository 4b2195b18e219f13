#pragma once

// Dense kernels shared by the inference path and the autodiff tape. All
// matrices are row-major; activations are laid out positions x features and
// linear layers compute x * W^T with W stored out_dim x in_dim.

#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "circuit_probe/errors.hpp"

namespace circuit_probe {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixX<float>;
using Index = Eigen::Index;

inline std::string shape_string(Index rows, Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a) + " and " + shape_string(b));
  }
  MatrixX<typename DerivedA::Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// a * b^T, the layout used by every linear projection.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul_nt(const Eigen::MatrixBase<DerivedA>& a,
                                             const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_string(a) + " and " + shape_string(b) +
                     "^T");
  }
  MatrixX<typename DerivedA::Scalar> out(a.rows(), b.rows());
  out.noalias() = a * b.transpose();
  return out;
}

/// Replaces subnormal entries with zero.
template <typename Scalar>
void flush_subnormals(MatrixX<Scalar>& m) {
  const Scalar tiny = std::numeric_limits<Scalar>::min();
  m = (m.array().abs() < tiny).select(Scalar(0), m);
}

template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.cols() == 0) throw ContractError("softmax_rows: empty rows");
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const Scalar row_max = m.row(i).maxCoeff();
    out.row(i) = (m.row(i).array() - row_max).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  flush_subnormals(out);
  return out;
}

inline constexpr double kRmsNormEps = 1e-6;

/// Normalizes every row to unit root-mean-square, then scales by `gain`
/// (a 1 x cols row).
template <typename Derived, typename DerivedGain>
MatrixX<typename Derived::Scalar> rmsnorm_rows(const Eigen::MatrixBase<Derived>& x,
                                               const Eigen::MatrixBase<DerivedGain>& gain) {
  using Scalar = typename Derived::Scalar;
  if (x.cols() == 0) throw ContractError("rmsnorm: empty vector");
  if (gain.size() != x.cols()) {
    throw ShapeError("rmsnorm: gain " + shape_string(gain) + " does not match input " + shape_string(x));
  }
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mean_sq = x.row(i).squaredNorm() / static_cast<Scalar>(x.cols());
    const Scalar inv_rms = Scalar(1) / std::sqrt(mean_sq + static_cast<Scalar>(kRmsNormEps));
    out.row(i) = (x.row(i).array() * inv_rms * gain.reshaped().transpose().array()).matrix();
  }
  return out;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  // Split on sign so exp never overflows.
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
MatrixX<typename Derived::Scalar> silu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw ContractError("silu: empty input");
  return x.unaryExpr([](Scalar v) { return v * sigmoid(v); });
}

template <typename Scalar>
Scalar silu_derivative(Scalar x) {
  const Scalar s = sigmoid(x);
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

/// Tanh approximation of GELU.
template <typename Derived>
MatrixX<typename Derived::Scalar> gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw ContractError("gelu: empty input");
  return x.unaryExpr([](Scalar v) {
    const Scalar inner = static_cast<Scalar>(kGeluC) * (v + Scalar(0.044715) * v * v * v);
    return Scalar(0.5) * v * (Scalar(1) + std::tanh(inner));
  });
}

template <typename Scalar>
Scalar gelu_derivative(Scalar v) {
  const Scalar c = static_cast<Scalar>(kGeluC);
  const Scalar inner = c * (v + Scalar(0.044715) * v * v * v);
  const Scalar t = std::tanh(inner);
  const Scalar d_inner = c * (Scalar(1) + Scalar(3) * Scalar(0.044715) * v * v);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * (Scalar(1) - t * t) * d_inner;
}

/// Rotary position embedding, half-split layout: within each head, feature i
/// pairs with feature i + head_dim/2. Row r of `x` sits at position
/// `first_position + r`. `inverse` rotates by the negated angle, which is also
/// the backward pass since the map is orthogonal.
template <typename Scalar>
void apply_rope(MatrixX<Scalar>& x, Index n_heads, Index first_position, double base,
                bool inverse = false) {
  const Index head_dim = x.cols() / n_heads;
  const Index half = head_dim / 2;
  for (Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(first_position + r);
    for (Index i = 0; i < half; ++i) {
      const double inv_freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = inverse ? -pos * inv_freq : pos * inv_freq;
      const Scalar c = static_cast<Scalar>(std::cos(angle));
      const Scalar s = static_cast<Scalar>(std::sin(angle));
      for (Index h = 0; h < n_heads; ++h) {
        Scalar& a = x(r, h * head_dim + i);
        Scalar& b = x(r, h * head_dim + i + half);
        const Scalar a0 = a;
        const Scalar b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

/// Multi-head causal attention. `q` holds rows for positions
/// first_position .. first_position + q.rows() - 1; `k` and `v` hold every
/// position from 0. Query at position p attends to keys 0..p. When `probs` is
/// given it receives the per-head attention matrices.
template <typename Scalar>
MatrixX<Scalar> causal_attention(const MatrixX<Scalar>& q,
                                 const std::type_identity_t<Eigen::Ref<const MatrixX<Scalar>>>& k,
                                 const std::type_identity_t<Eigen::Ref<const MatrixX<Scalar>>>& v,
                                 Index n_heads, Index first_position,
                                 std::vector<MatrixX<Scalar>>* probs = nullptr) {
  if (k.rows() != v.rows() || k.cols() != q.cols() || v.cols() != q.cols()) {
    throw ShapeError("attention: q " + shape_string(q) + ", k " + shape_string(k) + ", v " +
                     shape_string(v));
  }
  if (first_position + q.rows() > k.rows()) {
    throw ShapeError("attention: queries extend past the key cache");
  }
  const Index head_dim = q.cols() / n_heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
  MatrixX<Scalar> out(q.rows(), q.cols());
  if (probs) probs->resize(static_cast<std::size_t>(n_heads));
  for (Index h = 0; h < n_heads; ++h) {
    MatrixX<Scalar> scores(q.rows(), k.rows());
    scores.noalias() = q.middleCols(h * head_dim, head_dim) * k.middleCols(h * head_dim, head_dim).transpose();
    scores *= scale;
    for (Index i = 0; i < scores.rows(); ++i) {
      for (Index j = first_position + i + 1; j < scores.cols(); ++j) {
        scores(i, j) = -std::numeric_limits<Scalar>::infinity();
      }
    }
    MatrixX<Scalar> p = softmax_rows(scores);
    out.middleCols(h * head_dim, head_dim).noalias() = p * v.middleCols(h * head_dim, head_dim);
    if (probs) (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }
  return out;
}

}  // namespace circuit_probe
