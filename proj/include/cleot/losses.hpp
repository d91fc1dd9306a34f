#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "cleot/errors.hpp"
#include "cleot/noise.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

/// Batch-mean loss and its gradient w.r.t. the predicted probabilities.
struct LossValue {
  double value = 0.0;
  Matrix grad;
};

namespace detail {

inline void check_loss_shapes(const Matrix& y, const Matrix& p, const char* who) {
  require_same_shape(y, p, who);
  if (p.rows() == 0) throw ShapeError(std::string(who) + ": empty batch");
}

inline void require_one_hot(const Matrix& y, const char* who) {
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    int ones = 0;
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      if (y(i, k) == 1.0) ++ones;
      else if (y(i, k) != 0.0) ones = 2;
    }
    if (ones != 1) throw ContractError(std::string(who) + ": row " + std::to_string(i) + " is not one-hot");
  }
}

// d/dp log(clamp(p)); zero where the clamp is active.
inline double dlog(double p) { return (p < kProbFloor || p > 1.0) ? 0.0 : 1.0 / p; }

}  // namespace detail

/// Mean over the batch of -sum_k y_k log p_k. Targets may be simplex-valued.
inline LossValue cross_entropy(const Matrix& y, const Matrix& p) {
  detail::check_loss_shapes(y, p, "cross_entropy");
  const double inv_m = 1.0 / static_cast<double>(p.rows());
  LossValue out{0.0, Matrix(p.rows(), p.cols())};
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      row += y(i, k) * -clamped_log(p(i, k));
      out.grad(i, k) = -y(i, k) * detail::dlog(p(i, k)) * inv_m;
    }
    out.value += row;
  }
  out.value *= inv_m;
  return out;
}

enum class RobustKind { unhinged, sigmoid, ramp, savage };

/// Loss as a function of s, the predicted probability of the labeled class.
inline double robust_curve(RobustKind kind, double s) {
  switch (kind) {
    case RobustKind::unhinged: return 1.0 - s;
    case RobustKind::savage: return (1.0 - s) * (1.0 - s);
    case RobustKind::sigmoid: return 1.0 / (1.0 + std::exp(4.0 * (2.0 * s - 1.0)));
    case RobustKind::ramp: return std::min(1.0, std::max(0.0, 1.5 - 2.0 * s));
  }
  return 0.0;
}

inline double robust_slope(RobustKind kind, double s) {
  switch (kind) {
    case RobustKind::unhinged: return -1.0;
    case RobustKind::savage: return -2.0 * (1.0 - s);
    case RobustKind::sigmoid: {
      const double l = robust_curve(kind, s);
      return -8.0 * l * (1.0 - l);
    }
    case RobustKind::ramp: {
      const double v = 1.5 - 2.0 * s;
      return (v > 0.0 && v < 1.0) ? -2.0 : 0.0;
    }
  }
  return 0.0;
}

/// Bounded margin-style losses on s = <y, p>; `y` must be strictly one-hot.
inline LossValue robust_loss(RobustKind kind, const Matrix& y, const Matrix& p) {
  detail::check_loss_shapes(y, p, "robust_loss");
  detail::require_one_hot(y, "robust_loss");
  const double inv_m = 1.0 / static_cast<double>(p.rows());
  LossValue out{0.0, Matrix::Zero(p.rows(), p.cols())};
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double s = y.row(i).dot(p.row(i));
    out.value += robust_curve(kind, s);
    out.grad.row(i) = robust_slope(kind, s) * inv_m * y.row(i);
  }
  out.value *= inv_m;
  return out;
}

/// Soft bootstrapping: cross-entropy against beta*y + (1-beta)*p, with the
/// prediction inside the target differentiated as well.
inline LossValue bootstrap_soft(const Matrix& y, const Matrix& p, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw ContractError("bootstrap_soft: beta must lie in (0,1]");
  detail::check_loss_shapes(y, p, "bootstrap_soft");
  const double inv_m = 1.0 / static_cast<double>(p.rows());
  LossValue out{0.0, Matrix(p.rows(), p.cols())};
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      const double t = beta * y(i, k) + (1.0 - beta) * p(i, k);
      const double lp = clamped_log(p(i, k));
      out.value += -t * lp;
      out.grad(i, k) = (-(1.0 - beta) * lp - t * detail::dlog(p(i, k))) * inv_m;
    }
  out.value *= inv_m;
  return out;
}

enum class Correction { backward, forward };

/// Inverse of a transition matrix together with its 1-norm condition number.
struct InvertedTransition {
  Matrix inverse;
  double condition_number = 0.0;
};

inline InvertedTransition invert_transition(const TransitionMatrix& e) {
  const Matrix& m = e.matrix();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
  const auto norm1 = [](const Eigen::MatrixXd& a) { return a.cwiseAbs().colwise().sum().maxCoeff(); };
  if (!lu.isInvertible())
    throw InvertibilityError("backward correction: transition matrix is singular (condition number inf)",
                             std::numeric_limits<double>::infinity());
  const Eigen::MatrixXd inv = lu.inverse();
  const double cond = norm1(m) * norm1(inv);
  if (!std::isfinite(cond) || cond > 1e12)
    throw InvertibilityError("backward correction: transition matrix is ill-conditioned (condition number " +
                                 std::to_string(cond) + ")",
                             cond);
  return {inv, cond};
}

namespace detail {

inline LossValue forward_corrected(const Matrix& e, const Matrix& y, const Matrix& p) {
  const double inv_m = 1.0 / static_cast<double>(p.rows());
  const Eigen::Index c = p.cols();
  LossValue out{0.0, Matrix::Zero(p.rows(), c)};
  std::vector<double> q(static_cast<std::size_t>(c)), dq(static_cast<std::size_t>(c));
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index k = 0; k < c; ++k) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < c; ++i) s += e(i, k) * p(r, i);
      q[static_cast<std::size_t>(k)] = s;
    }
    double row = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
      row += y(r, k) * -clamped_log(q[static_cast<std::size_t>(k)]);
      dq[static_cast<std::size_t>(k)] = -y(r, k) * dlog(q[static_cast<std::size_t>(k)]);
    }
    out.value += row;
    for (Eigen::Index i = 0; i < c; ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < c; ++k) s += e(i, k) * dq[static_cast<std::size_t>(k)];
      out.grad(r, i) = s * inv_m;
    }
  }
  out.value *= inv_m;
  return out;
}

inline LossValue backward_corrected(const Matrix& e_inv, const Matrix& y, const Matrix& p) {
  const double inv_m = 1.0 / static_cast<double>(p.rows());
  const Eigen::Index c = p.cols();
  LossValue out{0.0, Matrix::Zero(p.rows(), c)};
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    double row = 0.0;
    for (Eigen::Index i = 0; i < c; ++i) {
      // weight of the clean-class-i loss under the observed (noisy) label
      double w = 0.0;
      for (Eigen::Index j = 0; j < c; ++j) w += y(r, j) * e_inv(j, i);
      row += w * -clamped_log(p(r, i));
      out.grad(r, i) = -w * dlog(p(r, i)) * inv_m;
    }
    out.value += row;
  }
  out.value *= inv_m;
  return out;
}

}  // namespace detail

/// Loss correction with a known transition matrix. Forward: cross-entropy of
/// the noisy label against E^T p. Backward: per-class cross-entropies mixed
/// with the rows of E^{-1}; may be negative per sample.
inline LossValue corrected_loss(Correction mode, const TransitionMatrix& e, const Matrix& y_noisy, const Matrix& p) {
  detail::check_loss_shapes(y_noisy, p, "corrected_loss");
  if (static_cast<std::size_t>(p.cols()) != e.classes())
    throw ShapeError("corrected_loss: " + std::to_string(p.cols()) + " classes vs transition matrix of " +
                     std::to_string(e.classes()));
  if (mode == Correction::forward) return detail::forward_corrected(e.matrix(), y_noisy, p);
  return detail::backward_corrected(invert_transition(e).inverse, y_noisy, p);
}

/// A configured baseline loss, as named in experiment configs.
class LossKind {
 public:
  enum class Tag { cross_entropy, unhinged, sigmoid, ramp, savage, bootstrap_soft, backward, forward };

  static LossKind cross_entropy() { return LossKind(Tag::cross_entropy); }
  static LossKind robust(RobustKind k) {
    switch (k) {
      case RobustKind::unhinged: return LossKind(Tag::unhinged);
      case RobustKind::sigmoid: return LossKind(Tag::sigmoid);
      case RobustKind::ramp: return LossKind(Tag::ramp);
      case RobustKind::savage: return LossKind(Tag::savage);
    }
    return LossKind(Tag::unhinged);
  }
  static LossKind bootstrap_soft(double beta = 0.95) {
    if (!(beta > 0.0 && beta <= 1.0)) throw ContractError("bootstrap_soft: beta must lie in (0,1]");
    LossKind k(Tag::bootstrap_soft);
    k.beta_ = beta;
    return k;
  }
  static LossKind corrected(Correction mode, const TransitionMatrix& e) {
    LossKind k(mode == Correction::backward ? Tag::backward : Tag::forward);
    k.transition_ = e;
    if (mode == Correction::backward) k.inverse_ = invert_transition(e).inverse;
    return k;
  }

  /// Parses a config tag; `e` is required for the correction losses.
  static LossKind from_tag(const std::string& tag, double bootstrap_beta = 0.95,
                           const std::optional<TransitionMatrix>& e = std::nullopt) {
    if (tag == "cross_entropy") return cross_entropy();
    if (tag == "unhinged") return robust(RobustKind::unhinged);
    if (tag == "sigmoid") return robust(RobustKind::sigmoid);
    if (tag == "ramp") return robust(RobustKind::ramp);
    if (tag == "savage") return robust(RobustKind::savage);
    if (tag == "bootstrap_soft") return bootstrap_soft(bootstrap_beta);
    if (tag == "backward" || tag == "forward") {
      if (!e) throw ContractError(tag + " correction needs a transition matrix");
      return corrected(tag == "backward" ? Correction::backward : Correction::forward, *e);
    }
    throw ContractError("unknown loss tag '" + tag + "'");
  }

  Tag tag() const { return tag_; }
  std::string name() const {
    switch (tag_) {
      case Tag::cross_entropy: return "cross_entropy";
      case Tag::unhinged: return "unhinged";
      case Tag::sigmoid: return "sigmoid";
      case Tag::ramp: return "ramp";
      case Tag::savage: return "savage";
      case Tag::bootstrap_soft: return "bootstrap_soft";
      case Tag::backward: return "backward";
      case Tag::forward: return "forward";
    }
    return "?";
  }

  LossValue operator()(const Matrix& y, const Matrix& p) const {
    switch (tag_) {
      case Tag::cross_entropy: return cleot::cross_entropy(y, p);
      case Tag::unhinged: return robust_loss(RobustKind::unhinged, y, p);
      case Tag::sigmoid: return robust_loss(RobustKind::sigmoid, y, p);
      case Tag::ramp: return robust_loss(RobustKind::ramp, y, p);
      case Tag::savage: return robust_loss(RobustKind::savage, y, p);
      case Tag::bootstrap_soft: return cleot::bootstrap_soft(y, p, beta_);
      case Tag::forward:
        detail::check_loss_shapes(y, p, "corrected_loss");
        return detail::forward_corrected(transition_->matrix(), y, p);
      case Tag::backward:
        detail::check_loss_shapes(y, p, "corrected_loss");
        return detail::backward_corrected(*inverse_, y, p);
    }
    return {};
  }

 private:
  explicit LossKind(Tag t) : tag_(t) {}
  Tag tag_;
  double beta_ = 0.95;
  std::optional<TransitionMatrix> transition_;
  std::optional<Matrix> inverse_;
};

}  // namespace cleot
