#include <gtest/gtest.h>

#include <cmath>

#include "iir/schedule.hpp"
#include "properties.hpp"

using namespace iir;

TEST(BetaSchedule, LinearEndpointsAndLength) {
  const BetaSchedule s = BetaSchedule::standard();
  EXPECT_EQ(s.steps(), 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
  // Uniform increments.
  const double d = (0.02 - 1e-4) / 999.0;
  for (int k : {2, 500, 999}) EXPECT_NEAR(s.beta(k) - s.beta(k - 1), d, 1e-15);
}

TEST(BetaSchedule, AlphaBarIsCumulativeProduct) {
  const BetaSchedule s = BetaSchedule::standard();
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  double prod = 1.0;
  for (int k = 1; k <= 1000; ++k) {
    prod *= 1.0 - s.beta(k);
    ASSERT_NEAR(s.alpha_bar(k), prod, 1e-14) << k;
    ASSERT_DOUBLE_EQ(s.alpha(k), 1.0 - s.beta(k));
  }
  // Strictly decreasing and positive at T.
  for (int k = 1; k <= 1000; ++k) ASSERT_LT(s.alpha_bar(k), s.alpha_bar(k - 1));
  EXPECT_GT(s.alpha_bar(1000), 0.0);
  EXPECT_LT(s.alpha_bar(1000), 1e-4);
}

TEST(BetaSchedule, SingleStep) {
  const BetaSchedule s = BetaSchedule::make(1, 0.3, 0.5);
  EXPECT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.3);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.7);
}

TEST(BetaSchedule, RejectsInvalidRanges) {
  EXPECT_THROW(BetaSchedule::make(0, 1e-4, 0.02), ValidationError);
  EXPECT_THROW(BetaSchedule::make(10, 0.0, 0.02), ValidationError);
  EXPECT_THROW(BetaSchedule::make(10, 0.03, 0.02), ValidationError);
  EXPECT_THROW(BetaSchedule::make(10, 1e-4, 1.0), ValidationError);
  const BetaSchedule s = BetaSchedule::standard();
  EXPECT_THROW(s.beta(0), ValidationError);
  EXPECT_THROW(s.alpha_bar(1001), ValidationError);
}

TEST(QSample, ZeroStepCopiesInput) {
  const BetaSchedule s = BetaSchedule::standard();
  Image x0(2, 2, 3, 0.3f), eps(2, 2, 3, 5.0f);
  EXPECT_TRUE(q_sample(x0, 0, eps, s) == x0);
}

TEST(QSample, ClosedForm) {
  const BetaSchedule s = BetaSchedule::standard();
  Image x0(1, 1, 3, 0.5f), eps(1, 1, 3, -1.0f);
  const Image out = q_sample(x0, 300, eps, s);
  const double ab = s.alpha_bar(300);
  EXPECT_NEAR(out.at(0, 0, 1), std::sqrt(ab) * 0.5 - std::sqrt(1 - ab), 1e-6);
  EXPECT_THROW(q_sample(x0, 1, Image(1, 2, 3), s), ValidationError);
}

TEST(QSample, MarginalMomentsWithin3Sigma) {
  const auto r = iir::testing::q_sample_moments();
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(QSample, SequentialChainMatchesMarginal) {
  const auto r = iir::testing::sequential_matches_marginal();
  EXPECT_TRUE(r.ok) << r.detail;
}
