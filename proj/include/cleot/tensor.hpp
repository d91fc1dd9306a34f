#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cleot/errors.hpp"

namespace cleot {

/// Dense row-major matrix of doubles. Row i of a batch is sample i.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;

/// Smallest probability fed to a logarithm in any cross-entropy term.
inline constexpr double kProbFloor = 1e-12;

inline std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline double clamped_log(double p) { return std::log(p < kProbFloor ? kProbFloor : (p > 1.0 ? 1.0 : p)); }

/// Row-wise softmax with per-row max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      out(i, k) = std::exp(logits(i, k) - mx);
      sum += out(i, k);
    }
    out.row(i) /= sum;
  }
  return out;
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
inline Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs) {
  require_same_shape(probs, grad_probs, "softmax_backward");
  Matrix out(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double dot = probs.row(i).dot(grad_probs.row(i));
    for (Eigen::Index k = 0; k < probs.cols(); ++k) out(i, k) = probs(i, k) * (grad_probs(i, k) - dot);
  }
  return out;
}

/// log(sum(exp(v))) computed with max subtraction.
template <typename Range>
double log_sum_exp(const Range& v) {
  double mx = -INFINITY;
  for (double x : v) mx = x > mx ? x : mx;
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline Matrix one_hot(std::span<const int> labels, std::size_t classes) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(classes) + ")");
    out(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return out;
}

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index k = 0;
    m.row(i).maxCoeff(&k);
    out[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
  return out;
}

/// Selects rows by index.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(idx[r]));
  return out;
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
inline Matrix pairwise_sq_dists(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("pairwise_sq_dists: feature dims " + shape_str(a) + " vs " + shape_str(b));
  Matrix out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) out(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return out;
}

}  // namespace cleot
