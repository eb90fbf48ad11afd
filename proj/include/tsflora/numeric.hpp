#pragma once

// Dense kernels with their reverse-mode counterparts. Everything here is a
// pure function of its arguments; backward functions return the
// vector-Jacobian product of the matching forward definition.

#include <cmath>
#include <concepts>
#include <numbers>
#include <span>
#include <vector>

#include "tsflora/tensor.hpp"

namespace tsflora {

template <typename DA, typename DB>
Mat<typename DA::Scalar> matmul(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a) + " * " +
                         shape_string(b));
  }
  return a * b;
}

/// Softmax over each row, with the row max subtracted first.
template <typename Derived>
Mat<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Mat<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar peak = x.row(i).maxCoeff();
    Scalar total = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      y(i, j) = std::exp(x(i, j) - peak);
      total += y(i, j);
    }
    y.row(i) /= total;
  }
  return y;
}

/// dx = y * (dy - <dy, y>) per row, where y is the softmax output.
template <typename DY, typename DG>
Mat<typename DY::Scalar> softmax_rows_backward(const Eigen::MatrixBase<DY>& y,
                                               const Eigen::MatrixBase<DG>& dy) {
  if (y.rows() != dy.rows() || y.cols() != dy.cols()) {
    throw DimensionError("softmax_rows_backward: " + shape_string(y) + " vs " + shape_string(dy));
  }
  using Scalar = typename DY::Scalar;
  Mat<Scalar> dx(y.rows(), y.cols());
  for (Index i = 0; i < y.rows(); ++i) {
    Scalar inner = 0;
    for (Index j = 0; j < y.cols(); ++j) inner += dy(i, j) * y(i, j);
    for (Index j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (dy(i, j) - inner);
  }
  return dx;
}

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;                 // (x - mean) * inv_std
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
};

/// Row-wise layer norm with biased variance: (x - mean) / sqrt(var + eps).
template <typename Derived>
Mat<typename Derived::Scalar> layer_norm(const Eigen::MatrixBase<Derived>& x,
                                         const RowVec<typename Derived::Scalar>& gamma,
                                         const RowVec<typename Derived::Scalar>& beta,
                                         typename Derived::Scalar eps,
                                         LayerNormCache<typename Derived::Scalar>* cache = nullptr) {
  using Scalar = typename Derived::Scalar;
  if (gamma.size() != x.cols() || beta.size() != x.cols()) {
    throw DimensionError("layer_norm: input " + shape_string(x) + ", gamma " +
                         shape_string(gamma) + ", beta " + shape_string(beta));
  }
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive", "ln_eps");
  const Index rows = x.rows();
  const Index cols = x.cols();
  Mat<Scalar> normalized(rows, cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(rows);
  for (Index i = 0; i < rows; ++i) {
    Scalar mean = 0;
    for (Index j = 0; j < cols; ++j) mean += x(i, j);
    mean /= static_cast<Scalar>(cols);
    Scalar var = 0;
    for (Index j = 0; j < cols; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<Scalar>(cols);
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    for (Index j = 0; j < cols; ++j) normalized(i, j) = (x(i, j) - mean) * inv_std(i);
  }
  Mat<Scalar> y = (normalized.array().rowwise() * gamma.array()).rowwise() + beta.array();
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
struct LayerNormGrads {
  Mat<Scalar> dx;
  RowVec<Scalar> dgamma;
  RowVec<Scalar> dbeta;
};

template <typename Scalar>
LayerNormGrads<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const RowVec<Scalar>& gamma,
                                           const LayerNormCache<Scalar>& cache) {
  const Mat<Scalar>& xhat = cache.normalized;
  if (dy.rows() != xhat.rows() || dy.cols() != xhat.cols()) {
    throw DimensionError("layer_norm_backward: upstream " + shape_string(dy) + " vs cached " +
                         shape_string(xhat));
  }
  const Index cols = dy.cols();
  LayerNormGrads<Scalar> g;
  g.dgamma = (dy.array() * xhat.array()).colwise().sum();
  g.dbeta = dy.colwise().sum();
  g.dx.resize(dy.rows(), cols);
  for (Index i = 0; i < dy.rows(); ++i) {
    Scalar mean_g = 0;
    Scalar mean_gx = 0;
    for (Index j = 0; j < cols; ++j) {
      const Scalar gj = dy(i, j) * gamma(j);
      mean_g += gj;
      mean_gx += gj * xhat(i, j);
    }
    mean_g /= static_cast<Scalar>(cols);
    mean_gx /= static_cast<Scalar>(cols);
    for (Index j = 0; j < cols; ++j) {
      g.dx(i, j) = cache.inv_std(i) * (dy(i, j) * gamma(j) - mean_g - xhat(i, j) * mean_gx);
    }
  }
  return g;
}

// GELU, tanh form:
//   gelu(x) = 0.5 x (1 + tanh(c (x + 0.044715 x^3))),  c = sqrt(2 / pi)
inline constexpr double kGeluCubic = 0.044715;
inline const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

template <std::floating_point Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = static_cast<Scalar>(kGeluScale);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(kGeluCubic) * x * x * x)));
}

template <std::floating_point Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar c = static_cast<Scalar>(kGeluScale);
  const Scalar inner = c * (x + Scalar(kGeluCubic) * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = c * (Scalar(1) + Scalar(3 * kGeluCubic) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * dinner;
}

template <typename Derived>
Mat<typename Derived::Scalar> gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

template <typename DX, typename DY>
Mat<typename DX::Scalar> gelu_backward(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& dy) {
  if (x.rows() != dy.rows() || x.cols() != dy.cols()) {
    throw DimensionError("gelu_backward: " + shape_string(x) + " vs " + shape_string(dy));
  }
  using Scalar = typename DX::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu_derivative(v); }).cwiseProduct(dy);
}

template <typename Scalar>
struct LossAndGrad {
  Scalar loss = 0;
  Mat<Scalar> dlogits;
};

/// Mean negative log-softmax of the labelled class; dlogits = (softmax - onehot) / B.
template <typename Derived>
LossAndGrad<typename Derived::Scalar> cross_entropy(const Eigen::MatrixBase<Derived>& logits,
                                                    std::span<const int> labels) {
  using Scalar = typename Derived::Scalar;
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.cols()) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(logits.cols()) + ")",
                        "label");
    }
  }
  LossAndGrad<Scalar> out;
  const Index batch = logits.rows();
  if (batch == 0) {
    out.dlogits.resize(0, logits.cols());
    return out;
  }
  out.dlogits = softmax_rows(logits);
  for (Index i = 0; i < batch; ++i) {
    const Scalar peak = logits.row(i).maxCoeff();
    Scalar total = 0;
    for (Index j = 0; j < logits.cols(); ++j) total += std::exp(logits(i, j) - peak);
    out.loss += (peak + std::log(total)) - logits(i, labels[i]);
    out.dlogits(i, labels[i]) -= Scalar(1);
  }
  out.loss /= static_cast<Scalar>(batch);
  out.dlogits /= static_cast<Scalar>(batch);
  return out;
}

template <typename Scalar>
struct LinearGrads {
  Mat<Scalar> dx;
  Mat<Scalar> dw;
};

/// Backward of y = x * w.
template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& dy) {
  if (dy.rows() != x.rows() || dy.cols() != w.cols() || x.cols() != w.rows()) {
    throw DimensionError("linear_backward: x " + shape_string(x) + ", w " + shape_string(w) +
                         ", dy " + shape_string(dy));
  }
  return {dy * w.transpose(), x.transpose() * dy};
}

}  // namespace tsflora
