#include <gtest/gtest.h>

#include <cmath>

#include "cleot/losses.hpp"
#include "cleot/rng.hpp"
#include "test_util.hpp"

using namespace cleot;

namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) m(0, k++) = x;
  return m;
}

Matrix random_probs(Eigen::Index m, Eigen::Index c, Rng& rng) {
  Matrix z(m, c);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = 2.0 * standard_normal(rng);
  return softmax_rows(z);
}

Matrix random_one_hot(Eigen::Index m, Eigen::Index c, Rng& rng) {
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < m; ++i) labels.push_back(static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(c))));
  return one_hot(labels, static_cast<std::size_t>(c));
}

// Random row-stochastic matrix with a dominant diagonal (invertible).
TransitionMatrix random_transition(std::size_t c, Rng& rng) {
  Matrix e(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    for (Eigen::Index j = 0; j < e.cols(); ++j) e(i, j) = uniform01(rng) + (i == j ? static_cast<double>(c) : 0.0);
    e.row(i) /= e.row(i).sum();
  }
  return TransitionMatrix(e);
}

// Gradient of loss(y, softmax(z)) w.r.t. z against central differences.
void check_logit_gradient(const LossKind& loss, const Matrix& y, const Matrix& z, Rng& rng, int count) {
  const auto value = [&](const Matrix& zz) { return loss(y, softmax_rows(zz)).value; };
  const Matrix p = softmax_rows(z);
  const Matrix gz = softmax_backward(p, loss(y, p).grad);
  for (int t = 0; t < count; ++t) {
    const auto idx = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(z.size())));
    Matrix zp = z, zm = z;
    zp.data()[idx] += 1e-5;
    zm.data()[idx] -= 1e-5;
    testutil::expect_rel_close(gz.data()[idx], (value(zp) - value(zm)) / 2e-5, 1e-4, 1e-6);
  }
}

}  // namespace

TEST(CrossEntropy, PerfectPredictionIsZero) {
  EXPECT_LE(cross_entropy(row({1, 0, 0}), row({1, 0, 0})).value, 1e-11);
}

TEST(CrossEntropy, UniformOverFour) {
  EXPECT_NEAR(cross_entropy(row({1, 0, 0, 0}), row({0.25, 0.25, 0.25, 0.25})).value, std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SoftTarget) {
  EXPECT_NEAR(cross_entropy(row({0.3, 0.7}), row({0.5, 0.5})).value, -0.3 * std::log(0.5) - 0.7 * std::log(0.5), 1e-15);
  EXPECT_NEAR(cross_entropy(row({0.3, 0.7}), row({0.5, 0.5})).value, 0.6931, 1e-4);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  const auto v = cross_entropy(row({0, 1}), row({1, 0}));
  EXPECT_NEAR(v.value, -std::log(1e-12), 1e-9);
  EXPECT_TRUE(v.grad.allFinite());
}

TEST(CrossEntropy, IsBatchMean) {
  Matrix y(2, 2), p(2, 2);
  y << 1, 0, 0, 1;
  p << 0.5, 0.5, 0.2, 0.8;
  EXPECT_NEAR(cross_entropy(y, p).value, 0.5 * (-std::log(0.5) - std::log(0.8)), 1e-15);
}

TEST(CrossEntropy, ShapeMismatch) { EXPECT_THROW(cross_entropy(row({1, 0}), row({0.2, 0.3, 0.5})), ShapeError); }

TEST(Robust, UnhingedEndpoints) {
  EXPECT_EQ(robust_loss(RobustKind::unhinged, row({1, 0}), row({1, 0})).value, 0.0);
  EXPECT_EQ(robust_loss(RobustKind::unhinged, row({1, 0}), row({0, 1})).value, 1.0);
}

TEST(Robust, SavageAtHalf) { EXPECT_DOUBLE_EQ(robust_loss(RobustKind::savage, row({0, 1}), row({0.5, 0.5})).value, 0.25); }

TEST(Robust, UnhingedSymmetry) {
  Rng rng = make_rng(3, Stream::sampling);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index c = 2 + static_cast<Eigen::Index>(uniform_index(rng, 6));
    const Matrix p = random_probs(1, c, rng);
    double total = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
      Matrix e = Matrix::Zero(1, c);
      e(0, k) = 1.0;
      total += robust_loss(RobustKind::unhinged, e, p).value;
    }
    EXPECT_NEAR(total, static_cast<double>(c - 1), 1e-12);
  }
}

TEST(Robust, MonotoneAndBounded) {
  for (auto kind : {RobustKind::unhinged, RobustKind::sigmoid, RobustKind::ramp, RobustKind::savage}) {
    double prev = robust_curve(kind, 0.0);
    for (int i = 1; i <= 100; ++i) {
      const double v = robust_curve(kind, i / 100.0);
      EXPECT_LE(v, prev);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      prev = v;
    }
  }
  EXPECT_DOUBLE_EQ(robust_curve(RobustKind::ramp, 0.25), 1.0);
  EXPECT_DOUBLE_EQ(robust_curve(RobustKind::ramp, 0.75), 0.0);
  EXPECT_DOUBLE_EQ(robust_curve(RobustKind::sigmoid, 0.5), 0.5);
}

TEST(Robust, RequiresOneHot) {
  EXPECT_THROW(robust_loss(RobustKind::unhinged, row({0.5, 0.5}), row({0.5, 0.5})), ContractError);
}

TEST(Bootstrap, BetaOneIsCrossEntropy) {
  Rng rng = make_rng(4, Stream::sampling);
  const Matrix p = random_probs(5, 3, rng);
  const Matrix y = random_one_hot(5, 3, rng);
  const auto a = bootstrap_soft(y, p, 1.0);
  const auto b = cross_entropy(y, p);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(Bootstrap, BetaZeroIsPredictionEntropy) {
  EXPECT_NEAR(bootstrap_soft(row({1, 0}), row({0.5, 0.5}), 1e-300).value, std::log(2.0), 1e-12);
}

TEST(Bootstrap, HandEvaluation) {
  // target (0.95 + 0.05 * 0.9, 0.05 * 0.1) = (0.995, 0.005)
  const double expected = -0.995 * std::log(0.9) - 0.005 * std::log(0.1);
  EXPECT_NEAR(bootstrap_soft(row({1, 0}), row({0.9, 0.1}), 0.95).value, expected, 1e-15);
  EXPECT_NEAR(expected, 0.11635, 1e-5);
}

TEST(Bootstrap, BetaOutOfRange) {
  EXPECT_THROW(bootstrap_soft(row({1, 0}), row({0.5, 0.5}), 0.0), ContractError);
  EXPECT_THROW(bootstrap_soft(row({1, 0}), row({0.5, 0.5}), 1.5), ContractError);
  EXPECT_THROW(LossKind::bootstrap_soft(0.0), ContractError);
}

TEST(Correction, IdentityEqualsCrossEntropyExactly) {
  Rng rng = make_rng(5, Stream::sampling);
  for (std::size_t c : {2u, 3u, 5u}) {
    const Matrix p = random_probs(7, static_cast<Eigen::Index>(c), rng);
    const Matrix y = random_one_hot(7, static_cast<Eigen::Index>(c), rng);
    const auto ce = cross_entropy(y, p);
    for (auto mode : {Correction::forward, Correction::backward}) {
      const auto v = corrected_loss(mode, TransitionMatrix::identity(c), y, p);
      EXPECT_EQ(v.value, ce.value);
      EXPECT_EQ(v.grad, ce.grad);
    }
  }
}

TEST(Correction, ForwardHandExample) {
  const TransitionMatrix e((Matrix(2, 2) << 0.8, 0.2, 0.2, 0.8).finished());
  EXPECT_NEAR(corrected_loss(Correction::forward, e, row({1, 0}), row({1, 0})).value, -std::log(0.8), 1e-15);
}

TEST(Correction, BackwardIsUnbiasedByEnumeration) {
  Rng rng = make_rng(6, Stream::sampling);
  for (std::size_t c : {2u, 3u, 5u}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto e = random_transition(c, rng);
      const Matrix p = random_probs(1, static_cast<Eigen::Index>(c), rng);
      for (std::size_t clean = 0; clean < c; ++clean) {
        double expected = 0.0;
        for (std::size_t noisy = 0; noisy < c; ++noisy) {
          Matrix y = Matrix::Zero(1, static_cast<Eigen::Index>(c));
          y(0, static_cast<Eigen::Index>(noisy)) = 1.0;
          expected += e.matrix()(static_cast<Eigen::Index>(clean), static_cast<Eigen::Index>(noisy)) *
                      corrected_loss(Correction::backward, e, y, p).value;
        }
        Matrix y = Matrix::Zero(1, static_cast<Eigen::Index>(c));
        y(0, static_cast<Eigen::Index>(clean)) = 1.0;
        EXPECT_NEAR(expected, cross_entropy(y, p).value, 1e-10);
      }
    }
  }
}

TEST(Correction, BackwardCanBeNegative) {
  const TransitionMatrix e((Matrix(2, 2) << 0.6, 0.4, 0.4, 0.6).finished());
  EXPECT_LT(corrected_loss(Correction::backward, e, row({1, 0}), row({0.999, 0.001})).value, 0.0);
}

TEST(Correction, SingularMatrixNamesConditionNumber) {
  const TransitionMatrix e((Matrix(2, 2) << 0.5, 0.5, 0.5, 0.5).finished());
  try {
    corrected_loss(Correction::backward, e, row({1, 0}), row({0.5, 0.5}));
    FAIL() << "expected InvertibilityError";
  } catch (const InvertibilityError& err) {
    EXPECT_NE(std::string(err.what()).find("condition number"), std::string::npos);
    EXPECT_TRUE(std::isinf(err.condition_number()) || err.condition_number() > 1e12);
  }
  EXPECT_NO_THROW(corrected_loss(Correction::forward, e, row({1, 0}), row({0.5, 0.5})));
}

TEST(Correction, ClassCountMismatch) {
  EXPECT_THROW(corrected_loss(Correction::forward, TransitionMatrix::identity(3), row({1, 0}), row({0.5, 0.5})),
               ShapeError);
}

TEST(LossKindTest, TagsRoundTrip) {
  const auto e = TransitionMatrix::identity(2);
  for (const std::string tag : {"cross_entropy", "unhinged", "sigmoid", "ramp", "savage", "bootstrap_soft", "backward",
                                "forward"})
    EXPECT_EQ(LossKind::from_tag(tag, 0.95, e).name(), tag);
  EXPECT_THROW(LossKind::from_tag("forward"), ContractError);
  EXPECT_THROW(LossKind::from_tag("hinge"), ContractError);
}

TEST(LossKindTest, GradientsThroughSoftmax) {
  Rng rng = make_rng(8, Stream::sampling);
  const auto e = random_transition(3, rng);
  for (const std::string tag : {"cross_entropy", "unhinged", "sigmoid", "ramp", "savage", "bootstrap_soft", "backward",
                                "forward"}) {
    SCOPED_TRACE(tag);
    const auto loss = LossKind::from_tag(tag, 0.8, e);
    Matrix z(6, 3);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = standard_normal(rng);
    check_logit_gradient(loss, random_one_hot(6, 3, rng), z, rng, 100);
  }
}
