#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cleot/errors.hpp"
#include "cleot/losses.hpp"
#include "cleot/nn.hpp"
#include "cleot/ot.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

enum class GradientMode {
  unrolled,  // differentiate through the recorded Sinkhorn iterations
  detached,  // treat the coupling as a constant
};

struct CleotConfig {
  double alpha = 1.0;    // feature-distance weight
  double beta = 0.005;   // label-loss weight inside the ground cost
  double lambda = 0.005; // entropic weight; 0 selects the exact assignment
  std::size_t unroll_depth = 100;
  GradientMode mode = GradientMode::unrolled;
  std::size_t max_iterations = 1000;  // forward-only solves (validation, full batch)
  double tolerance = 1e-9;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(lambda >= 0.0))
      throw ContractError("CleotConfig: alpha, beta and lambda must be non-negative");
    if (alpha == 0.0 && beta == 0.0 && lambda > 0.0)
      throw ContractError("CleotConfig: alpha and beta are both 0; only lambda = 0 (identity fallback) is allowed");
    if (lambda == 0.0 && mode != GradientMode::detached)
      throw ContractError("CleotConfig: lambda = 0 uses the exact assignment and requires detached gradients");
    if (unroll_depth < 1) throw ContractError("CleotConfig: unroll_depth must be >= 1");
  }

  SinkhornConfig sinkhorn() const {
    SinkhornConfig s;
    s.lambda = lambda;
    s.max_iterations = max_iterations;
    s.tolerance = tolerance;
    s.unroll_depth = unroll_depth;
    return s;
  }
};

/// Entry (i, j): clamped cross-entropy of label row i against prediction row j.
inline Matrix label_loss_matrix(const Matrix& labels, const Matrix& predictions) {
  if (labels.cols() != predictions.cols())
    throw ShapeError("label_loss_matrix: " + shape_str(labels) + " vs " + shape_str(predictions));
  Matrix neg_log = predictions.unaryExpr([](double p) { return -clamped_log(p); });
  return labels * neg_log.transpose();
}

/// alpha * |x_i - x_j|^2 + beta * CE(noisy_i, f(x_j)) over one batch.
inline GroundCost ground_cost(const Matrix& x, const Matrix& noisy_labels, const Matrix& predictions, double alpha,
                              double beta) {
  if (x.rows() != noisy_labels.rows() || x.rows() != predictions.rows())
    throw ShapeError("ground_cost: batch sizes differ (" + std::to_string(x.rows()) + ", " +
                     std::to_string(noisy_labels.rows()) + ", " + std::to_string(predictions.rows()) + ")");
  Matrix d = alpha * pairwise_sq_dists(x, x);
  if (beta != 0.0) d += beta * label_loss_matrix(noisy_labels, predictions);
  return GroundCost(std::move(d));
}

/// Permutation coupling (mass 1/m per matched pair) from the exact assignment.
inline Coupling assignment_coupling(const GroundCost& cost) {
  const auto a = exact_assignment(cost.matrix());
  const auto m = cost.rows();
  Coupling c{Matrix::Zero(m, m), 0.0};
  for (Eigen::Index i = 0; i < m; ++i) c.plan(i, a.row_to_col[static_cast<std::size_t>(i)]) = 1.0 / static_cast<double>(m);
  return c;
}

/// Converged coupling between uniform measures (exact assignment when lambda = 0).
inline Coupling solve_coupling(const GroundCost& cost, const CleotConfig& cfg) {
  if (cfg.lambda == 0.0) return assignment_coupling(cost);
  const auto a = DiscreteMeasure::uniform(static_cast<std::size_t>(cost.rows()));
  const auto b = DiscreteMeasure::uniform(static_cast<std::size_t>(cost.cols()));
  return sinkhorn(cost, a, b, cfg.sinkhorn()).coupling;
}

/// Forward-only objective sum_ij gamma_ij CE(noisy_i, p_j) with a converged coupling.
inline double cleot_objective(const Matrix& x, const Matrix& noisy_labels, const Matrix& predictions,
                              const CleotConfig& cfg) {
  cfg.validate();
  const auto cost = ground_cost(x, noisy_labels, predictions, cfg.alpha, cfg.beta);
  const auto coupling = solve_coupling(cost, cfg);
  return coupling.plan.cwiseProduct(label_loss_matrix(noisy_labels, predictions)).sum();
}

struct CleotBatchResult {
  double loss = 0.0;
  std::vector<Matrix> grads;  // aligned with DenseNet::parameters(), l2 included
  Coupling coupling;
  Matrix predictions;
};

/// Minibatch objective sum_ij gamma*_ij CE(noisy_i, f(x_j)) with gamma* the
/// entropic coupling for the joint ground cost, plus parameter gradients.
/// Unrolled mode differentiates through both the explicit loss and the
/// coupling's dependence on the cost; detached mode holds gamma* fixed.
inline CleotBatchResult cleot_batch_loss(const Matrix& x, const Matrix& noisy_labels, DenseNet& net,
                                         const CleotConfig& cfg, Rng* rng = nullptr, std::size_t batch_index = 0) {
  cfg.validate();
  if (x.rows() < 1) throw ContractError("cleot_batch_loss: empty batch");
  auto fwd = forward(net, x, Mode::train, rng);
  const Matrix& p = fwd.output;
  const Matrix losses = label_loss_matrix(noisy_labels, p);
  const auto m = static_cast<std::size_t>(x.rows());

  CleotBatchResult res;
  Matrix grad_losses;  // d objective / d losses_ij
  try {
    const auto cost = ground_cost(x, noisy_labels, p, cfg.alpha, cfg.beta);
    if (cfg.mode == GradientMode::unrolled) {
      const auto a = DiscreteMeasure::uniform(m);
      auto solved = sinkhorn_unrolled(cost, a, a, cfg.sinkhorn());
      grad_losses = solved.coupling.plan + cfg.beta * sinkhorn_backward(solved.tape, losses);
      res.coupling = std::move(solved.coupling);
    } else {
      res.coupling = solve_coupling(cost, cfg);
      grad_losses = res.coupling.plan;
    }
  } catch (const NumericError& e) {
    throw NumericError("cleot_batch_loss: batch " + std::to_string(batch_index) + ": " + e.what());
  }
  res.loss = res.coupling.plan.cwiseProduct(losses).sum();

  // losses_ij = -sum_k y_ik log p_jk
  const Matrix weighted = grad_losses.transpose() * noisy_labels;
  Matrix grad_p(p.rows(), p.cols());
  for (Eigen::Index j = 0; j < p.rows(); ++j)
    for (Eigen::Index k = 0; k < p.cols(); ++k) grad_p(j, k) = -weighted(j, k) * detail::dlog(p(j, k));

  res.grads = backward(net, fwd.tape, grad_p).params;
  res.loss += net.l2_penalty();
  res.predictions = p;
  return res;
}

/// Coupling-weighted label averages, rescaled by m so each row lies on the
/// simplex: y_hat_j = m * sum_i gamma_ij y_i.
inline Matrix propagate_labels(const Coupling& coupling, const Matrix& noisy_labels) {
  const Matrix& g = coupling.plan;
  if (g.rows() != noisy_labels.rows()) throw ShapeError("propagate_labels: coupling rows do not match the labels");
  const auto m = static_cast<double>(g.cols());
  const double tol = std::max(coupling.marginal_error, 1e-9);
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    if (std::abs(g.col(j).sum() - 1.0 / m) > tol)
      throw ContractError("propagate_labels: column " + std::to_string(j) + " marginal is not uniform");
  return m * (g.transpose() * noisy_labels);
}

}  // namespace cleot
