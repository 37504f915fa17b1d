#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"
#include "tpn/geom3d.hpp"

using namespace tpn;
using tpn::testing::random_rotation;
using tpn::testing::random_vec;

TEST(Hat, ZeroVectorGivesZeroMatrix) { EXPECT_TRUE(hat(Vec3::Zero()).isZero(0.0)); }

TEST(Hat, MatchesCrossProduct) {
  EXPECT_TRUE((hat(Vec3::UnitZ()) * Vec3::UnitX()).isApprox(Vec3::UnitY()));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vec3 w = random_vec(rng, 5.0), u = random_vec(rng, 5.0);
    EXPECT_LT((hat(w) * u - w.cross(u)).norm(), 1e-12);
    EXPECT_TRUE((hat(w) + hat(w).transpose()).isZero(0.0));
  }
}

TEST(Vee, InvertsHat) {
  EXPECT_EQ(vee(hat(Vec3(1, 2, 3))), Vec3(1, 2, 3));
  EXPECT_EQ(vee(Mat3::Zero()), Vec3::Zero());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const Vec3 w = random_vec(rng, 10.0);
    EXPECT_EQ(vee(hat(w)), w);
  }
}

TEST(Vee, RejectsNonSkewInput) {
  Mat3 s = hat(Vec3(1, 2, 3));
  s(0, 0) = 1e-6;
  try {
    vee(s);
    FAIL() << "expected NotSkew";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotSkew);
  }
  s(0, 0) = 1e-10;
  EXPECT_NO_THROW(vee(s));
}

TEST(So3Exp, ZeroIsIdentity) { EXPECT_TRUE(so3_exp(Vec3::Zero()).isApprox(Mat3::Identity())); }

TEST(So3Exp, QuarterTurnAboutZ) {
  const Vec3 r = so3_exp(Vec3(0, 0, std::numbers::pi / 2)) * Vec3::UnitX();
  EXPECT_LT((r - Vec3::UnitY()).norm(), 1e-12);
}

TEST(So3Exp, AgreesWithAngleAxis) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const Vec3 w = random_vec(rng, 2.0);
    const Mat3 ref = Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix();
    EXPECT_LT((so3_exp(w) - ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(So3Exp, InverseAndOrthonormality) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    Vec3 w = random_vec(rng, 2.0);
    if (w.norm() > std::numbers::pi) w *= std::numbers::pi / w.norm();
    const Mat3 r = so3_exp(w);
    EXPECT_LT((so3_exp(w) * so3_exp(-w) - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
  }
}

TEST(So3Exp, SmallAngleSeriesIsContinuous) {
  for (double s : {1e-9, 5e-7, 9.9e-7, 1.01e-6, 1e-5}) {
    const Vec3 w = s * Vec3(0.3, -0.5, 0.8).normalized();
    const Mat3 ref = Mat3::Identity() + hat(w) + 0.5 * hat(w) * hat(w);
    EXPECT_LT((so3_exp(w) - ref).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(So3RightJacobian, MatchesFiniteDifferences) {
  // exp(w + d) ~ exp(w) exp(Jr(w) d)
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const Vec3 w = random_vec(rng, 1.5);
    const Mat3 jr = so3_right_jacobian(w);
    for (int c = 0; c < 3; ++c) {
      const double h = 1e-6;
      const Vec3 d = h * Vec3::Unit(c);
      const Mat3 lhs = so3_exp(w).transpose() * (so3_exp(w + d) - so3_exp(w - d)) / (2 * h);
      EXPECT_LT((vee(0.5 * (lhs - lhs.transpose())) - jr.col(c)).norm(), 1e-8);
    }
  }
}

TEST(Reorthonormalize, ProjectsBackOntoRotations) {
  std::mt19937_64 rng(6);
  const Mat3 r = random_rotation(rng);
  Mat3 noisy = r;
  noisy(0, 1) += 1e-4;
  const Mat3 fixed = reorthonormalize(noisy);
  EXPECT_LT(orthonormality_error(fixed), 1e-14);
  EXPECT_NEAR(fixed.determinant(), 1.0, 1e-14);
  EXPECT_LT((fixed - r).norm(), 1e-4);
}

TEST(MengerCurvature, ReferenceTriples) {
  EXPECT_DOUBLE_EQ(menger_curvature({0, 0, 0}, {1, 0, 0}, {2, 0, 0}), 0.0);
  EXPECT_NEAR(menger_curvature({1, 0, 0}, {0, 1, 0}, {-1, 0, 0}), 1.0, 1e-12);
  EXPECT_NEAR(menger_curvature({0, 0, 0}, {1, 0, 0}, {1, 1, 0}), std::sqrt(2.0), 1e-12);
}

TEST(MengerCurvature, MatchesCircumcircleFit) {
  // Oracle: circumcenter from the perpendicular-bisector linear system.
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d a = Eigen::Vector2d::Random(), b = Eigen::Vector2d::Random(), c = Eigen::Vector2d::Random();
    Eigen::Matrix2d m;
    m.row(0) = 2 * (b - a).transpose();
    m.row(1) = 2 * (c - a).transpose();
    const Eigen::Vector2d rhs(b.squaredNorm() - a.squaredNorm(), c.squaredNorm() - a.squaredNorm());
    if (std::abs(m.determinant()) < 1e-3) continue;
    const Eigen::Vector2d center = m.lu().solve(rhs);
    const double k = menger_curvature({a.x(), a.y(), 0}, {b.x(), b.y(), 0}, {c.x(), c.y(), 0});
    EXPECT_NEAR(k, 1.0 / (center - a).norm(), 1e-9 * std::max(1.0, k));
  }
}

TEST(MengerCurvature, InvariantUnderRigidMotionAndReversal) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 200; ++i) {
    const Vec3 p1 = random_vec(rng, 3.0), p2 = random_vec(rng, 3.0), p3 = random_vec(rng, 3.0);
    const Mat3 r = random_rotation(rng);
    const Vec3 t = random_vec(rng, 10.0);
    const double k = menger_curvature(p1, p2, p3);
    EXPECT_NEAR(menger_curvature(r * p1 + t, r * p2 + t, r * p3 + t), k, 1e-9 * std::max(1.0, k));
    EXPECT_NEAR(menger_curvature(p3, p2, p1), k, 1e-12 * std::max(1.0, k));
  }
}

TEST(MengerCurvature, CoincidentPointsAreRejected) {
  try {
    menger_curvature({0, 0, 0}, {0, 0, 0}, {1, 0, 0});
    FAIL() << "expected DegeneratePoints";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegeneratePoints);
  }
}
