#include <gtest/gtest.h>

#include <cmath>

#include "detrpose/geometry.hpp"
#include "detrpose/random.hpp"

using namespace detrpose;

namespace {

PersonInstance make_instance(std::vector<Keypoint> kps, double area) {
  PersonInstance p;
  p.keypoints = std::move(kps);
  p.area = area;
  return p;
}

}  // namespace

TEST(KeypointSimilarity, ZeroDistanceIsOne) { EXPECT_DOUBLE_EQ(keypoint_similarity(0.0, 0.3, 0.1), 1.0); }

TEST(KeypointSimilarity, MatchesGaussianOracle) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double d = rng.uniform(0.0, 1.0), s = rng.uniform(0.01, 1.0), k = rng.uniform(0.01, 0.3);
    EXPECT_NEAR(keypoint_similarity(d, s, k), std::exp(-d * d / (2 * s * s * k * k)), 1e-15);
  }
}

TEST(KeypointSimilarity, OneSigmaGivesExpMinusHalf) {
  EXPECT_NEAR(keypoint_similarity(0.1, 1.0, 0.1), std::exp(-0.5), 1e-15);
}

TEST(KeypointSimilarity, RejectsBadArguments) {
  EXPECT_THROW(keypoint_similarity(0.1, 0.0, 0.1), ArgumentError);
  EXPECT_THROW(keypoint_similarity(0.1, 1.0, 0.0), ArgumentError);
  EXPECT_THROW(keypoint_similarity(-0.1, 1.0, 0.1), ArgumentError);
}

TEST(InstanceOks, IdenticalInstancesScoreOne) {
  auto gt = make_instance({{0.1, 0.2, true}, {0.4, 0.5, true}, {0.9, 0.9, false}}, 0.04);
  EXPECT_DOUBLE_EQ(instance_oks(gt, gt, KsParams::uniform(3)), 1.0);
}

TEST(InstanceOks, AveragesOverVisibleKeypointsOnly) {
  auto gt = make_instance({{0.5, 0.5, true}, {0.2, 0.2, true}, {0.0, 0.0, false}}, 0.25);
  auto pred = gt;
  pred.keypoints[0].x += 0.05;
  pred.keypoints[2] = {0.9, 0.9, true};
  const double s = 0.5, k = 0.1;
  const double expect = (std::exp(-0.0025 / (2 * s * s * k * k)) + 1.0) / 2.0;
  EXPECT_NEAR(instance_oks(pred, gt, KsParams::uniform(3)), expect, 1e-15);
}

TEST(InstanceOks, ZeroAreaIsDegenerate) {
  auto gt = make_instance({{0.5, 0.5, true}}, 0.0);
  EXPECT_THROW(instance_oks(gt, gt, KsParams::uniform(1)), DegenerateInstanceError);
}

TEST(InstanceOks, CountMismatchThrows) {
  auto gt = make_instance({{0.5, 0.5, true}}, 0.1);
  EXPECT_THROW(instance_oks(gt, gt, KsParams::uniform(2)), ArgumentError);
}

TEST(InstanceOks, BoundedAndMonotoneInDisplacement) {
  auto gt = make_instance({{0.5, 0.5, true}, {0.3, 0.6, true}}, 0.09);
  double prev = 1.0;
  for (int i = 1; i <= 50; ++i) {
    auto pred = gt;
    for (auto& k : pred.keypoints) k.x += 0.004 * i;
    const double o = instance_oks(pred, gt, KsParams::uniform(2));
    EXPECT_GE(o, 0.0);
    EXPECT_LE(o, prev);
    prev = o;
  }
}

TEST(NormalizeInstance, DividesByLongerSide) {
  auto raw = make_instance({{80, 40, true}}, 1600);
  raw.bbox = {0, 0, 40, 40};
  const auto n = normalize_instance(raw, 160, 80);
  EXPECT_DOUBLE_EQ(n.keypoints[0].x, 0.5);
  EXPECT_DOUBLE_EQ(n.keypoints[0].y, 0.25);
  EXPECT_DOUBLE_EQ(n.area, 1600.0 / (160.0 * 160.0));
  EXPECT_DOUBLE_EQ(n.bbox.x1, 0.25);
  EXPECT_THROW(normalize_instance(raw, 0, 10), ArgumentError);
}

TEST(BboxFromKeypoints, TightBoxWithMargin) {
  auto p = make_instance({{1, 2, true}, {4, 6, true}, {100, 100, false}}, 0);
  const auto b = bbox_from_keypoints(p);
  EXPECT_EQ(b, (Box{1, 2, 4, 6}));
  const auto m = bbox_from_keypoints(p, 0.1);
  EXPECT_DOUBLE_EQ(m.x0, 1 - 0.5);
  EXPECT_DOUBLE_EQ(m.y1, 6 + 0.5);
}

TEST(BboxFromKeypoints, NoVisibleKeypointThrows) {
  auto p = make_instance({{1, 2, false}}, 0);
  EXPECT_THROW(bbox_from_keypoints(p), DegenerateInstanceError);
}
