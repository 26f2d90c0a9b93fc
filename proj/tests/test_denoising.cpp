#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "detrpose/denoising.hpp"
#include "detrpose/random.hpp"

using namespace detrpose;

namespace {

PersonInstance centered_gt(std::size_t k) {
  PersonInstance p;
  for (std::size_t i = 0; i < k; ++i) p.keypoints.push_back({0.4 + 0.02 * i, 0.5 - 0.01 * i, true});
  p.bbox = {0.3, 0.3, 0.7, 0.7};
  p.area = 0.04;
  return p;
}

// Always returns values just below the upper bound.
struct NearUpperRng {
  double uniform(double lo, double hi) { return hi - 1e-12 * (hi - lo); }
};

struct FixedRng {
  std::vector<double> values;
  std::size_t i = 0;
  double uniform(double, double) { return values[i++ % values.size()]; }
};

}  // namespace

TEST(AlphaFromKs, KnownValues) {
  EXPECT_DOUBLE_EQ(alpha_from_ks(1.0, 0.7, 0.1), 0.0);
  EXPECT_NEAR(alpha_from_ks(0.5, 1.0, 0.1), 0.1 * std::sqrt(2 * std::log(2.0)), 1e-15);
  EXPECT_NEAR(alpha_from_ks(0.5, 1.0, 0.1), 0.117741, 1e-6);
  EXPECT_NEAR(alpha_from_ks(0.1, 0.5, 0.2), 0.214597, 1e-6);
}

TEST(AlphaFromKs, RejectsOutOfRange) {
  EXPECT_THROW(alpha_from_ks(0.0, 1.0, 0.1), ArgumentError);
  EXPECT_THROW(alpha_from_ks(1.5, 1.0, 0.1), ArgumentError);
  EXPECT_THROW(alpha_from_ks(0.5, 0.0, 0.1), ArgumentError);
}

TEST(AlphaFromKs, InvertsKeypointSimilarity) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double ks = 1.0 - rng.uniform(), s = 1.0 - rng.uniform(), kappa = 0.3 * (1.0 - rng.uniform());
    EXPECT_NEAR(keypoint_similarity(alpha_from_ks(ks, s, kappa), s, kappa), ks, 1e-6);
  }
}

TEST(RandomUnitVector, UnitNormAndUniformAngle) {
  Rng rng(2);
  constexpr int n = 100000, bins = 16;
  std::vector<int> count(bins, 0);
  for (int i = 0; i < n; ++i) {
    const auto v = random_unit_vector(rng);
    ASSERT_NEAR(std::hypot(v[0], v[1]), 1.0, 1e-6);
    double a = std::atan2(v[1], v[0]);
    if (a < 0) a += 2 * std::numbers::pi;
    count[std::min(bins - 1, static_cast<int>(a / (2 * std::numbers::pi) * bins))]++;
  }
  const double expect = static_cast<double>(n) / bins;
  double chi2 = 0.0;
  for (int c : count) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 37.697);  // 15 degrees of freedom, p = 0.001
}

TEST(GenPoseQueries, NearUnitSimilarityLeavesKeypointsInPlace) {
  NearUpperRng rng;
  const auto gt = centered_gt(5);
  const auto s = gen_pose_queries(gt, Polarity::Positive, KsParams::uniform(5), rng);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(s.instance.keypoints[i].x, gt.keypoints[i].x, 1e-6);
    EXPECT_NEAR(s.instance.keypoints[i].y, gt.keypoints[i].y, 1e-6);
    EXPECT_NEAR(s.sampled_ks[i], 1.0, 1e-9);
  }
}

TEST(GenPoseQueries, RecomputedSimilarityMatchesSample) {
  Rng rng(3);
  const auto gt = centered_gt(5);
  const auto params = KsParams::uniform(5, 0.12);
  for (int t = 0; t < 1000; ++t) {
    const auto s = gen_pose_queries(gt, t % 2 ? Polarity::Positive : Polarity::Negative, params, rng);
    for (std::size_t i = 0; i < 5; ++i) {
      if (s.clamped[i]) continue;
      const auto& p = s.instance.keypoints[i];
      const auto& g = gt.keypoints[i];
      EXPECT_NEAR(keypoint_similarity(std::hypot(p.x - g.x, p.y - g.y), 0.2, 0.12), s.sampled_ks[i], 1e-6);
    }
  }
}

TEST(GenPoseQueries, BandsHoldForUnclampedSamples) {
  Rng rng(4);
  const auto gt = centered_gt(3);
  const auto params = KsParams::uniform(3);
  for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
    const double lo = pol == Polarity::Positive ? 0.5 : 0.1, hi = pol == Polarity::Positive ? 1.0 : 0.5;
    for (int t = 0; t < 20000; ++t) {
      const auto s = gen_pose_queries(gt, pol, params, rng);
      for (std::size_t i = 0; i < 3; ++i) {
        ASSERT_GE(s.sampled_ks[i], lo);
        ASSERT_LT(s.sampled_ks[i], hi);
        if (s.clamped[i]) continue;
        const auto& p = s.instance.keypoints[i];
        const double ks = keypoint_similarity(std::hypot(p.x - gt.keypoints[i].x, p.y - gt.keypoints[i].y), 0.2, 0.1);
        ASSERT_GE(ks, lo);
        ASSERT_LT(ks, hi);
      }
    }
  }
}

TEST(GenPoseQueries, ClampsToUnitSquareAndFlagsIt) {
  Rng rng(5);
  PersonInstance gt;
  gt.keypoints = {{0.0, 0.0, true}, {1.0, 1.0, true}};
  gt.area = 0.25;
  int clamped = 0;
  for (int t = 0; t < 200; ++t) {
    const auto s = gen_pose_queries(gt, Polarity::Negative, KsParams::uniform(2), rng);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& p = s.instance.keypoints[i];
      EXPECT_TRUE(p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1);
      clamped += s.clamped[i] ? 1 : 0;
    }
  }
  EXPECT_GT(clamped, 0);
}

TEST(GenPoseQueries, RequiresVisibleKeypoint) {
  Rng rng(6);
  PersonInstance gt;
  gt.keypoints = {{0.5, 0.5, false}};
  gt.area = 0.1;
  EXPECT_THROW(gen_pose_queries(gt, Polarity::Positive, KsParams::uniform(1), rng), DegenerateInstanceError);
}

TEST(GenBoxQueries, ZeroAlphasKeepBox) {
  FixedRng rng{{0.0}};
  const Box b{0.1, 0.2, 0.5, 0.9};
  EXPECT_EQ(gen_box_queries(b, Polarity::Positive, 0.5, rng).instance.bbox, b);
}

TEST(GenBoxQueries, UnitBoxQuarterShift) {
  FixedRng rng{{0.25}};
  const auto s = gen_box_queries(Box{0, 0, 1, 1}, Polarity::Positive, 0.5, rng);
  EXPECT_EQ(s.instance.bbox, (Box{0.25, 0.25, 1.25, 1.25}));
}

TEST(GenBoxQueries, AlphaBands) {
  Rng rng(7);
  const Box b{0.2, 0.3, 0.6, 0.5};
  for (int t = 0; t < 20000; ++t) {
    const auto pos = gen_box_queries(b, Polarity::Positive, 0.5, rng);
    const auto neg = gen_box_queries(b, Polarity::Negative, 0.5, rng);
    for (const auto& a : pos.alphas)
      for (double v : a) ASSERT_LE(std::abs(v), 0.5);
    for (const auto& a : neg.alphas)
      for (double v : a) {
        ASSERT_GE(std::abs(v), 0.5);
        ASSERT_LE(std::abs(v), 1.0);
      }
    ASSERT_LE(neg.instance.bbox.x0, neg.instance.bbox.x1);
    ASSERT_LE(neg.instance.bbox.y0, neg.instance.bbox.y1);
  }
}

TEST(GenBoxQueries, DegenerateBoxThrows) {
  Rng rng(8);
  EXPECT_THROW(gen_box_queries(Box{0.1, 0.1, 0.1, 0.5}, Polarity::Positive, 0.5, rng), DegenerateInstanceError);
  EXPECT_THROW(gen_box_queries(Box{0, 0, 1, 1}, Polarity::Positive, 0.0, rng), ArgumentError);
}

TEST(DnLayout, CountsAndOrdering) {
  Rng rng(9);
  std::vector<PersonInstance> gts(3, centered_gt(5));
  const auto [layout, samples] = build_dn_layout(gts, 2, KsParams::uniform(5), rng);
  EXPECT_EQ(layout.total_dn_queries(), 12u);
  EXPECT_EQ(samples.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(samples[i].polarity, layout.polarity_of(i));
    EXPECT_EQ(samples[i].source_gt, layout.gt_of(i));
    EXPECT_EQ(layout.group_of(i), i / 6);
  }
  EXPECT_EQ(layout.index(1, 2, Polarity::Negative), 11u);
}

TEST(DnLayout, EmptyGroundTruthGivesNoQueries) {
  Rng rng(10);
  const auto [layout, samples] = build_dn_layout({}, 2, KsParams::uniform(5), rng);
  EXPECT_EQ(layout.total_dn_queries(), 0u);
  EXPECT_EQ(layout.matching_query_offset(), 0u);
  EXPECT_TRUE(samples.empty());
}

TEST(DnLayout, SingleGroundTruthSingleGroup) {
  Rng rng(11);
  const auto [layout, samples] = build_dn_layout({centered_gt(2)}, 1, KsParams::uniform(2), rng);
  ASSERT_EQ(samples.size(), 2u);
  EXPECT_EQ(samples[0].polarity, Polarity::Positive);
  EXPECT_EQ(samples[1].polarity, Polarity::Negative);
}

TEST(DnLayout, EffectiveGroupsRespectQueryBudget) {
  EXPECT_EQ(effective_dn_groups(2, 3, 20), 2u);
  EXPECT_EQ(effective_dn_groups(2, 4, 8), 1u);
  EXPECT_EQ(effective_dn_groups(2, 5, 8), 0u);
  EXPECT_EQ(effective_dn_groups(2, 0, 8), 0u);
}

TEST(AttentionMask, NoGroupsBlocksNothing) {
  const auto m = build_attention_mask(DnLayout{0, 0}, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_FALSE(m.at(i, j));
}

TEST(AttentionMask, OneGroupOneGtTwoMatching) {
  const auto m = build_attention_mask(DnLayout{1, 1}, 2);
  const bool expect[4][4] = {{0, 0, 1, 1}, {0, 0, 1, 1}, {1, 1, 0, 0}, {1, 1, 0, 0}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.at(i, j), expect[i][j]) << i << "," << j;
}

TEST(AttentionMask, OpenRelationIsAnEquivalence) {
  const DnLayout layout{3, 2};
  const auto m = build_attention_mask(layout, 5);
  const std::size_t n = layout.total_dn_queries() + 5;
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_FALSE(m.at(i, i));
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_EQ(m.at(i, j), m.at(j, i));
      for (std::size_t k = 0; k < n; ++k)
        if (!m.at(i, j) && !m.at(j, k)) EXPECT_FALSE(m.at(i, k));
    }
  }
}
