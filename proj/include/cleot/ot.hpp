#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cleot/errors.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

/// Probability weights on a finite support; every atom carries positive mass.
class DiscreteMeasure {
 public:
  explicit DiscreteMeasure(Vector weights) : w_(std::move(weights)) {
    if (w_.size() == 0) throw ContractError("DiscreteMeasure: empty support");
    for (Eigen::Index i = 0; i < w_.size(); ++i)
      if (!(w_[i] > 0.0) || !std::isfinite(w_[i]))
        throw ContractError("DiscreteMeasure: weight " + std::to_string(i) + " is not a positive finite number");
    if (std::abs(w_.sum() - 1.0) > 1e-12) throw ContractError("DiscreteMeasure: weights must sum to 1");
  }

  static DiscreteMeasure uniform(std::size_t n) {
    if (n == 0) throw ContractError("DiscreteMeasure: empty support");
    return DiscreteMeasure(Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
  }

  const Vector& weights() const { return w_; }
  std::size_t size() const { return static_cast<std::size_t>(w_.size()); }

 private:
  Vector w_;
};

/// Non-negative, finite pairwise cost matrix.
class GroundCost {
 public:
  explicit GroundCost(Matrix m) : m_(std::move(m)) {
    if (m_.size() == 0) throw ShapeError("GroundCost: empty matrix");
    for (Eigen::Index i = 0; i < m_.size(); ++i) {
      const double v = m_.data()[i];
      if (!std::isfinite(v)) throw NumericError("GroundCost: non-finite entry");
      if (v < 0.0) throw ContractError("GroundCost: negative entry");
    }
  }
  const Matrix& matrix() const { return m_; }
  Eigen::Index rows() const { return m_.rows(); }
  Eigen::Index cols() const { return m_.cols(); }

 private:
  Matrix m_;
};

struct SinkhornConfig {
  double lambda = 0.005;
  std::size_t max_iterations = 1000;
  double tolerance = 1e-9;         // sup-norm marginal violation
  std::size_t unroll_depth = 100;  // fixed iteration count for differentiable runs

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ContractError("SinkhornConfig: lambda must be positive");
    if (max_iterations < 1) throw ContractError("SinkhornConfig: max_iterations must be >= 1");
    if (unroll_depth < 1) throw ContractError("SinkhornConfig: unroll_depth must be >= 1");
    if (!(tolerance > 0.0)) throw ContractError("SinkhornConfig: tolerance must be positive");
  }
};

/// Transport plan together with its achieved sup-norm marginal violation.
struct Coupling {
  Matrix plan;
  double marginal_error = 0.0;
};

struct SinkhornResult {
  Coupling coupling;
  double value = 0.0;  // <plan, C>, entropy term excluded
  std::size_t iterations = 0;
  bool converged = false;
  Vector f;  // dual potentials
  Vector g;
};

/// Sup-norm violation of both marginals.
inline double marginal_error(const Matrix& plan, const Vector& a, const Vector& b) {
  const double rows = (plan.rowwise().sum() - a).cwiseAbs().maxCoeff();
  const double cols = (plan.colwise().sum().transpose() - b).cwiseAbs().maxCoeff();
  return std::max(rows, cols);
}

/// -sum plan log plan, with 0 log 0 = 0.
inline double entropy(const Matrix& plan) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < plan.size(); ++i) {
    const double v = plan.data()[i];
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

namespace detail {

// f_i = lam log a_i - lam LSE_j((g_j - C_ij)/lam). When `weights` is given it
// receives the row-normalized softmax exp((g_j - C_ij)/lam - LSE_i).
inline void update_rows(const Matrix& cost, const Vector& log_a, const Vector& g, double lam, Vector& f,
                        Matrix* weights) {
  const Eigen::Index n = cost.rows(), m = cost.cols();
  const double inv = 1.0 / lam;
  std::vector<double> z(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double* c = cost.data() + i * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      z[static_cast<std::size_t>(j)] = (g[j] - c[j]) * inv;
      mx = std::max(mx, z[static_cast<std::size_t>(j)]);
    }
    double s = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double e = std::exp(z[static_cast<std::size_t>(j)] - mx);
      z[static_cast<std::size_t>(j)] = e;
      s += e;
    }
    f[i] = lam * log_a[i] - lam * (mx + std::log(s));
    if (weights) {
      double* w = weights->data() + i * m;
      for (Eigen::Index j = 0; j < m; ++j) w[j] = z[static_cast<std::size_t>(j)] / s;
    }
  }
}

// g_j = lam log b_j - lam LSE_i((f_i - C_ij)/lam); `weights` as above but
// normalized down each column.
inline void update_cols(const Matrix& cost, const Vector& log_b, const Vector& f, double lam, Vector& g,
                        Matrix* weights) {
  const Eigen::Index n = cost.rows(), m = cost.cols();
  const double inv = 1.0 / lam;
  Vector mx = Vector::Constant(m, -std::numeric_limits<double>::infinity());
  Matrix z(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      z(i, j) = (f[i] - cost(i, j)) * inv;
      mx[j] = std::max(mx[j], z(i, j));
    }
  Vector s = Vector::Zero(m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      z(i, j) = std::exp(z(i, j) - mx[j]);
      s[j] += z(i, j);
    }
  for (Eigen::Index j = 0; j < m; ++j) g[j] = lam * log_b[j] - lam * (mx[j] + std::log(s[j]));
  if (weights) *weights = z.array().rowwise() / s.transpose().array();
}

inline Matrix plan_from_potentials(const Matrix& cost, const Vector& f, const Vector& g, double lam) {
  Matrix plan(cost.rows(), cost.cols());
  for (Eigen::Index i = 0; i < cost.rows(); ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j) plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / lam);
  return plan;
}

inline double plan_error(const Matrix& plan, const Vector& a, const Vector& b) {
  return plan.allFinite() ? marginal_error(plan, a, b) : std::numeric_limits<double>::infinity();
}

// One damped Newton step on the concave dual
//   a.f + b.g - lam sum exp((f_i + g_j - C_ij)/lam)
// with g_last pinned to remove the additive gauge. Returns false when no step
// reduces the marginal violation.
inline bool newton_step(const Matrix& cost, const Vector& a, const Vector& b, double lam, Vector& f, Vector& g) {
  const Eigen::Index n = cost.rows(), m = cost.cols(), k = n + m - 1;
  const Matrix plan = plan_from_potentials(cost, f, g, lam);
  const Vector r = plan.rowwise().sum(), s = plan.colwise().sum().transpose();
  Matrix h = Matrix::Zero(k, k);
  Vector grad(k);
  h.topLeftCorner(n, n).diagonal() = r;
  h.bottomRightCorner(m - 1, m - 1).diagonal() = s.head(m - 1);
  h.topRightCorner(n, m - 1) = plan.leftCols(m - 1);
  h.bottomLeftCorner(m - 1, n) = plan.leftCols(m - 1).transpose();
  h /= lam;
  grad.head(n) = a - r;
  grad.tail(m - 1) = (b - s).head(m - 1);
  const Vector step = h.ldlt().solve(grad);
  if (!step.allFinite()) return false;

  const double before = plan_error(plan, a, b);
  for (double t = 1.0; t > 1e-6; t *= 0.5) {
    Vector f2 = f + t * step.head(n);
    Vector g2 = g;
    g2.head(m - 1) += t * step.tail(m - 1);
    if (plan_error(plan_from_potentials(cost, f2, g2, lam), a, b) < before) {
      f = std::move(f2);
      g = std::move(g2);
      return true;
    }
  }
  return false;
}

inline void check_shapes(const GroundCost& cost, const DiscreteMeasure& a, const DiscreteMeasure& b) {
  if (static_cast<std::size_t>(cost.rows()) != a.size() || static_cast<std::size_t>(cost.cols()) != b.size())
    throw ShapeError("sinkhorn: cost " + shape_str(cost.matrix()) + " does not match marginals of size " +
                     std::to_string(a.size()) + " and " + std::to_string(b.size()));
}

inline void check_potentials(const Vector& f, const Vector& g) {
  if (!f.allFinite() || !g.allFinite()) throw NumericError("sinkhorn: non-finite dual potential");
}

}  // namespace detail

/// Entropic OT solved by log-domain Sinkhorn iterations on the dual
/// potentials. Stops once the row marginal violation (columns are exact after
/// each sweep) drops below `cfg.tolerance`; otherwise returns the last iterate
/// with `converged == false`.
///
/// Small-lambda problems can make the sweeps crawl, so after
/// `kNewtonAfter` sweeps the remaining budget goes to Newton steps on the
/// dual. Each Newton step counts as one iteration.
inline SinkhornResult sinkhorn(const GroundCost& cost, const DiscreteMeasure& a, const DiscreteMeasure& b,
                               const SinkhornConfig& cfg) {
  constexpr std::size_t kNewtonAfter = 200;
  cfg.validate();
  detail::check_shapes(cost, a, b);
  const Matrix& c = cost.matrix();
  const double lam = cfg.lambda;
  const Vector log_a = a.weights().array().log();
  const Vector log_b = b.weights().array().log();
  SinkhornResult res;
  res.f = Vector::Zero(c.rows());
  res.g = Vector::Zero(c.cols());
  Vector f_next(c.rows());
  bool newton = true;

  detail::update_rows(c, log_a, res.g, lam, res.f, nullptr);
  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    res.iterations = it;
    if (it > kNewtonAfter && newton && c.cols() > 1) {
      newton = detail::newton_step(c, a.weights(), b.weights(), lam, res.f, res.g);
      detail::check_potentials(res.f, res.g);
      if (detail::plan_error(detail::plan_from_potentials(c, res.f, res.g, lam), a.weights(), b.weights()) <
          cfg.tolerance) {
        res.converged = true;
        break;
      }
      if (newton) continue;
      detail::update_rows(c, log_a, res.g, lam, res.f, nullptr);
    }
    detail::update_cols(c, log_b, res.f, lam, res.g, nullptr);
    detail::check_potentials(res.f, res.g);
    // Row sums of the current plan equal a_i exp((f_i - f_next_i) / lam).
    detail::update_rows(c, log_a, res.g, lam, f_next, nullptr);
    double err = 0.0;
    for (Eigen::Index i = 0; i < c.rows(); ++i)
      err = std::max(err, std::abs(a.weights()[i] * std::expm1((res.f[i] - f_next[i]) / lam)));
    if (err < cfg.tolerance) {
      res.converged = true;
      break;
    }
    if (it < cfg.max_iterations) res.f = f_next;
  }
  res.coupling.plan = detail::plan_from_potentials(c, res.f, res.g, lam);
  res.coupling.marginal_error = marginal_error(res.coupling.plan, a.weights(), b.weights());
  res.value = res.coupling.plan.cwiseProduct(c).sum();
  if (!res.coupling.plan.allFinite()) throw NumericError("sinkhorn: non-finite coupling");
  return res;
}

/// Recorded iterates of a fixed-depth Sinkhorn run, sufficient for reverse
/// accumulation through every iteration.
struct SinkhornTape {
  double lambda = 0.0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<Matrix> row_weights;  // per iteration: softmax over j used by the f-update
  std::vector<Matrix> col_weights;  // per iteration: softmax over i used by the g-update
  Matrix plan;
};

struct UnrolledSinkhorn {
  Coupling coupling;
  double value = 0.0;
  SinkhornTape tape;
};

/// Exactly `cfg.unroll_depth` Sinkhorn sweeps from zero potentials, recording
/// what `sinkhorn_backward` needs. The returned plan is the truncated iterate,
/// not the converged fixed point.
inline UnrolledSinkhorn sinkhorn_unrolled(const GroundCost& cost, const DiscreteMeasure& a, const DiscreteMeasure& b,
                                          const SinkhornConfig& cfg) {
  cfg.validate();
  detail::check_shapes(cost, a, b);
  const Matrix& c = cost.matrix();
  const double lam = cfg.lambda;
  const Vector log_a = a.weights().array().log();
  const Vector log_b = b.weights().array().log();
  Vector f = Vector::Zero(c.rows()), g = Vector::Zero(c.cols());

  UnrolledSinkhorn out;
  auto& tape = out.tape;
  tape.lambda = lam;
  tape.rows = c.rows();
  tape.cols = c.cols();
  tape.row_weights.assign(cfg.unroll_depth, Matrix(c.rows(), c.cols()));
  tape.col_weights.assign(cfg.unroll_depth, Matrix(c.rows(), c.cols()));
  for (std::size_t k = 0; k < cfg.unroll_depth; ++k) {
    detail::update_rows(c, log_a, g, lam, f, &tape.row_weights[k]);
    detail::update_cols(c, log_b, f, lam, g, &tape.col_weights[k]);
  }
  detail::check_potentials(f, g);
  tape.plan = detail::plan_from_potentials(c, f, g, lam);
  out.coupling.plan = tape.plan;
  out.coupling.marginal_error = marginal_error(tape.plan, a.weights(), b.weights());
  out.value = tape.plan.cwiseProduct(c).sum();
  return out;
}

/// Gradient w.r.t. the cost matrix of a scalar loss L(plan), given dL/dplan,
/// by reverse accumulation through the recorded iterations.
inline Matrix sinkhorn_backward(const SinkhornTape& tape, const Matrix& grad_plan) {
  if (tape.row_weights.empty() || tape.row_weights.size() != tape.col_weights.size())
    throw StateError("sinkhorn_backward: tape holds no recorded iterations");
  if (grad_plan.rows() != tape.rows || grad_plan.cols() != tape.cols)
    throw StateError("sinkhorn_backward: upstream gradient " + shape_str(grad_plan) + " does not match the tape");
  const double lam = tape.lambda;

  // plan_ij = exp((f_i + g_j - C_ij) / lam)
  const Matrix w = grad_plan.cwiseProduct(tape.plan) / lam;
  Matrix grad_cost = -w;
  Vector grad_f = w.rowwise().sum();
  Vector grad_g = w.colwise().sum().transpose();

  for (std::size_t k = tape.row_weights.size(); k-- > 0;) {
    // g_j = lam log b_j - lam LSE_i((f_i - C_ij)/lam): dg_j/df_i = -P_ij, dg_j/dC_ij = P_ij
    const Matrix& p = tape.col_weights[k];
    grad_cost.noalias() += p * grad_g.asDiagonal();
    grad_f.noalias() -= p * grad_g;
    // f_i = lam log a_i - lam LSE_j((g_j - C_ij)/lam): df_i/dg_j = -Q_ij, df_i/dC_ij = Q_ij
    const Matrix& q = tape.row_weights[k];
    grad_cost.noalias() += grad_f.asDiagonal() * q;
    grad_g = -(q.transpose() * grad_f);
    grad_f.setZero();  // f at step k is recomputed from g; no earlier dependence
  }
  return grad_cost;
}

/// Minimum-cost perfect matching: `row_to_col[i]` is the column assigned to row i.
struct Assignment {
  std::vector<int> row_to_col;
  double cost = 0.0;
};

/// Hungarian method (shortest augmenting paths with potentials), O(n^3).
inline Assignment exact_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw ShapeError("exact_assignment: cost matrix must be square, got " + shape_str(cost));
  const auto n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out;
  out.row_to_col.assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) out.row_to_col[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  for (int i = 0; i < n; ++i) out.cost += cost(i, out.row_to_col[static_cast<std::size_t>(i)]);
  return out;
}

/// Writes "row,col,mass" lines for every entry with mass > `min_mass`.
inline void write_coupling_csv(const Matrix& plan, std::ostream& os, double min_mass = 0.0) {
  os << "row,col,mass\n";
  os.precision(17);
  for (Eigen::Index i = 0; i < plan.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.cols(); ++j)
      if (plan(i, j) > min_mass) os << i << ',' << j << ',' << plan(i, j) << '\n';
}

/// Reads the sparse format of `write_coupling_csv` into a dense n x m matrix;
/// entries not listed are zero.
inline Matrix read_coupling_csv(std::istream& is, Eigen::Index n, Eigen::Index m) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("row,col,mass", 0) != 0) throw ParseError("coupling: expected header row,col,mass", 1);
  Matrix plan = Matrix::Zero(n, m);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream cells(line);
    long long i = -1, j = -1;
    double w = 0.0;
    char c1 = 0, c2 = 0;
    if (!(cells >> i >> c1 >> j >> c2 >> w) || c1 != ',' || c2 != ',') throw ParseError("coupling: malformed row", lineno);
    if (i < 0 || j < 0 || i >= n || j >= m) throw ParseError("coupling: index out of range", lineno);
    if (!std::isfinite(w) || w < 0.0) throw ParseError("coupling: mass must be finite and nonnegative", lineno);
    plan(i, j) = w;
  }
  return plan;
}

}  // namespace cleot
