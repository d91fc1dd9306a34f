#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cleot/errors.hpp"
#include "cleot/rng.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

/// Row-stochastic label corruption model: entry (i, j) is p(noisy = j | clean = i).
class TransitionMatrix {
 public:
  explicit TransitionMatrix(Matrix e) : e_(std::move(e)) {
    if (e_.rows() < 1 || e_.rows() != e_.cols())
      throw ShapeError("TransitionMatrix: must be square, got " + shape_str(e_));
    for (Eigen::Index i = 0; i < e_.rows(); ++i) {
      for (Eigen::Index j = 0; j < e_.cols(); ++j)
        if (!(e_(i, j) >= 0.0 && e_(i, j) <= 1.0))
          throw ContractError("TransitionMatrix: entry (" + std::to_string(i) + "," + std::to_string(j) +
                              ") outside [0,1]");
      if (std::abs(e_.row(i).sum() - 1.0) > 1e-12)
        throw ContractError("TransitionMatrix: row " + std::to_string(i) + " does not sum to 1");
    }
  }

  static TransitionMatrix identity(std::size_t c) {
    return TransitionMatrix(Matrix::Identity(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c)));
  }

  std::size_t classes() const { return static_cast<std::size_t>(e_.rows()); }
  const Matrix& matrix() const { return e_; }
  double operator()(std::size_t i, std::size_t j) const {
    return e_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

 private:
  Matrix e_;
};

struct FlipPair {
  int source = 0;
  int target = 0;
  bool operator==(const FlipPair&) const = default;
};

/// Directed class flips sharing one noise probability.
struct FlipSpec {
  std::vector<FlipPair> pairs;
  double p_e = 0.0;
};

inline void check_noise_probability(double p_e) {
  if (!(p_e >= 0.0 && p_e < 1.0)) throw ContractError("noise probability must lie in [0,1), got " + std::to_string(p_e));
}

/// Uniform flips: 1 - p_e on the diagonal, p_e / (c - 1) elsewhere.
inline TransitionMatrix symmetric_matrix(std::size_t c, double p_e) {
  if (c < 2) throw ContractError("symmetric_matrix: need at least 2 classes");
  check_noise_probability(p_e);
  const auto n = static_cast<Eigen::Index>(c);
  Matrix e = Matrix::Constant(n, n, p_e / static_cast<double>(c - 1));
  e.diagonal().setConstant(1.0 - p_e);
  return TransitionMatrix(std::move(e));
}

/// Pair flips: a source class with k listed targets keeps 1 - p_e and sends
/// p_e / k to each target; unlisted classes are left clean.
inline TransitionMatrix asymmetric_matrix(std::size_t c, const FlipSpec& spec) {
  check_noise_probability(spec.p_e);
  const auto n = static_cast<Eigen::Index>(c);
  std::vector<std::vector<int>> targets(c);
  for (const auto& fp : spec.pairs) {
    if (fp.source < 0 || fp.target < 0 || static_cast<std::size_t>(fp.source) >= c ||
        static_cast<std::size_t>(fp.target) >= c)
      throw ContractError("asymmetric_matrix: pair " + std::to_string(fp.source) + "->" + std::to_string(fp.target) +
                          " references a class outside [0," + std::to_string(c) + ")");
    if (fp.source == fp.target) throw ContractError("asymmetric_matrix: class " + std::to_string(fp.source) + " flips to itself");
    auto& t = targets[static_cast<std::size_t>(fp.source)];
    if (std::find(t.begin(), t.end(), fp.target) != t.end())
      throw ContractError("asymmetric_matrix: duplicate pair " + std::to_string(fp.source) + "->" + std::to_string(fp.target));
    t.push_back(fp.target);
  }
  Matrix e = Matrix::Identity(n, n);
  for (std::size_t s = 0; s < c; ++s) {
    if (targets[s].empty()) continue;
    const auto row = static_cast<Eigen::Index>(s);
    e(row, row) = 1.0 - spec.p_e;
    for (int t : targets[s]) e(row, t) = spec.p_e / static_cast<double>(targets[s].size());
  }
  return TransitionMatrix(std::move(e));
}

/// Parses "a->b" entries separated by commas or whitespace. "a<->b" expands to
/// both directions.
inline std::vector<FlipPair> parse_flip_pairs(const std::string& text) {
  std::vector<FlipPair> out;
  std::string norm = text;
  std::replace(norm.begin(), norm.end(), ',', ' ');
  std::istringstream is(norm);
  std::string tok;
  while (is >> tok) {
    const bool both = tok.find("<->") != std::string::npos;
    const auto arrow = both ? tok.find("<->") : tok.find("->");
    if (arrow == std::string::npos) throw ParseError("flip pair '" + tok + "' lacks '->'");
    try {
      std::size_t used = 0;
      const std::string lhs = tok.substr(0, arrow), rhs = tok.substr(arrow + (both ? 3 : 2));
      const int a = std::stoi(lhs, &used);
      if (used != lhs.size()) throw std::invalid_argument(lhs);
      const int b = std::stoi(rhs, &used);
      if (used != rhs.size()) throw std::invalid_argument(rhs);
      out.push_back({a, b});
      if (both) out.push_back({b, a});
    } catch (const std::logic_error&) {
      throw ParseError("flip pair '" + tok + "' is not of the form int->int");
    }
  }
  return out;
}

struct NoisyLabels {
  std::vector<int> labels;
  std::vector<std::size_t> flipped;  // positions whose label changed
};

/// Resamples every label independently from its row of `e`.
inline NoisyLabels apply_noise(std::span<const int> labels, const TransitionMatrix& e, Rng& rng) {
  NoisyLabels out;
  out.labels.resize(labels.size());
  const std::size_t c = e.classes();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ContractError("apply_noise: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    const double u = uniform01(rng);
    double acc = 0.0;
    int drawn = y;
    for (std::size_t j = 0; j < c; ++j) {
      const double pj = e(static_cast<std::size_t>(y), j);
      if (pj <= 0.0) continue;
      drawn = static_cast<int>(j);
      acc += pj;
      if (u < acc) break;
    }
    out.labels[i] = drawn;
    if (drawn != y) out.flipped.push_back(i);
  }
  return out;
}

/// One-hot overload: returns the corrupted one-hot batch and the flip mask.
inline std::pair<Matrix, std::vector<std::size_t>> apply_noise(const Matrix& one_hot_labels, const TransitionMatrix& e,
                                                               Rng& rng) {
  if (static_cast<std::size_t>(one_hot_labels.cols()) != e.classes())
    throw ShapeError("apply_noise: label width does not match the transition matrix");
  auto noisy = apply_noise(argmax_rows(one_hot_labels), e, rng);
  return {one_hot(noisy.labels, e.classes()), std::move(noisy.flipped)};
}

/// CSV layout: first line holds c, then c comma-separated rows.
inline void write_transition_csv(const TransitionMatrix& e, std::ostream& os) {
  os.precision(17);
  os << e.classes() << '\n';
  for (std::size_t i = 0; i < e.classes(); ++i) {
    for (std::size_t j = 0; j < e.classes(); ++j) os << (j ? "," : "") << e(i, j);
    os << '\n';
  }
}

inline TransitionMatrix read_transition_csv(std::istream& is) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line)) throw ParseError("transition matrix: empty input", 1);
  std::size_t c = 0;
  try {
    c = static_cast<std::size_t>(std::stoul(line));
  } catch (const std::logic_error&) {
    throw ParseError("transition matrix: first line must be the class count", 1);
  }
  if (c == 0) throw ParseError("transition matrix: class count must be positive", 1);
  Matrix e(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
  for (std::size_t i = 0; i < c; ++i) {
    ++lineno;
    if (!std::getline(is, line)) throw ParseError("transition matrix: missing row", lineno);
    std::istringstream row(line);
    std::string cell;
    std::size_t j = 0;
    while (std::getline(row, cell, ',')) {
      if (j >= c) throw ParseError("transition matrix: too many columns", lineno);
      try {
        std::size_t used = 0;
        e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::stod(cell, &used);
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::logic_error&) {
        throw ParseError("transition matrix: non-numeric cell '" + cell + "'", lineno);
      }
      ++j;
    }
    if (j != c) throw ParseError("transition matrix: expected " + std::to_string(c) + " columns", lineno);
  }
  return TransitionMatrix(std::move(e));
}

}  // namespace cleot
