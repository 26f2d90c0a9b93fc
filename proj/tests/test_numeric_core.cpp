#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detrpose/attention.hpp"
#include "detrpose/gradcheck.hpp"
#include "detrpose/ops.hpp"
#include "detrpose/random.hpp"
#include "detrpose/sampling.hpp"
#include "detrpose/topk.hpp"

using namespace detrpose;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(d));
}

}  // namespace

TEST(Matmul, IdentityLeavesOperand) {
  Tensor<float> a({2, 2}, {1, 0, 0, 1});
  Tensor<float> b({2, 2}, {3, 4, 5, 6});
  auto c = matmul(a, b);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  auto c = matmul(Tensor<float>({1, 2}, {1, 2}), Tensor<float>({2, 1}, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(c.item(), 11.0f);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTranspose) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  Tensor<double> a_leaf(a.shape(), std::vector<double>(a.data().begin(), a.data().end()), true);
  sum(matmul(a_leaf, b)).backward();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a_leaf.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
  auto f = [&](const Tensor<double>& x) { return sum(matmul(x, b)); };
  EXPECT_LT(grad_check(f, a), 1e-6);
}

TEST(MaskedSoftmax, SingleOpenEntryGivesOneHot) {
  AttnMask mask(2, 3);
  for (std::size_t j = 0; j < 3; ++j) {
    mask.set(0, j, j != 1);
    mask.set(1, j, j != 2);
  }
  auto p = masked_softmax(Tensor<float>({2, 3}, {5, -1, 2, 0.3f, 9, -4}), mask);
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), (std::vector<float>{0, 1, 0, 0, 0, 1}));
}

TEST(MaskedSoftmax, UniformLogitsSpreadEvenly) {
  AttnMask mask(1, 5);
  mask.set(0, 0, true);
  mask.set(0, 3, true);
  auto p = masked_softmax(Tensor<double>({1, 5}, {2, 2, 2, 2, 2}), mask);
  EXPECT_EQ(p[0], 0.0);
  EXPECT_EQ(p[3], 0.0);
  for (std::size_t j : {1, 2, 4}) EXPECT_NEAR(p[j], 1.0 / 3.0, 1e-15);
}

TEST(MaskedSoftmax, MatchesScalarOracle) {
  AttnMask mask(1, 3);
  auto p = masked_softmax(Tensor<double>({1, 3}, {1, 2, 3}), mask);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(p[1], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-15);
}

TEST(MaskedSoftmax, FullyBlockedRowIsRejected) {
  AttnMask mask(2, 2);
  mask.set(1, 0, true);
  mask.set(1, 1, true);
  EXPECT_THROW(masked_softmax(Tensor<float>::zeros({2, 2}), mask), DegenerateMaskError);
  EXPECT_THROW(masked_softmax(Tensor<float>::zeros({2, 3}), AttnMask(2, 2)), DimensionError);
}

TEST(MaskedSoftmax, RowsSumToOneBlockedExactlyZero) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.index(6), c = 1 + rng.index(6);
    AttnMask mask(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) mask.set(i, j, rng.uniform() < 0.4);
      mask.set(i, rng.index(c), false);
    }
    std::vector<float> d(3 * r * c);
    for (auto& v : d) v = static_cast<float>(rng.uniform(-8, 8));
    auto p = masked_softmax(Tensor<float>({3, r, c}, d), mask);
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const float v = p[(b * r + i) * c + j];
          if (mask.at(i, j)) EXPECT_EQ(v, 0.0f);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(MaskedSoftmax, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  AttnMask mask(3, 4);
  mask.set(0, 1, true);
  mask.set(2, 0, true);
  mask.set(2, 3, true);
  auto x = random_tensor({3, 4}, rng, -2, 2);
  auto w = random_tensor({3, 4}, rng);
  auto f = [&](const Tensor<double>& t) { return sum(mul(masked_softmax(t, mask), w)); };
  EXPECT_LT(grad_check(f, x), 1e-4);
}

TEST(TopK, PicksLargestWithIndices) {
  auto r = topk(Tensor<float>({3}, {3, 1, 2}), 2);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(r.values[0], 3.0f);
  EXPECT_EQ(r.values[1], 2.0f);
}

TEST(TopK, TiesPreferSmallerIndex) {
  auto r = topk(Tensor<float>::full({6}, 0.5f), 3);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(TopK, KBeyondLengthThrows) { EXPECT_THROW(topk(Tensor<float>::zeros({3}), 4), BoundsError); }

TEST(TopK, AgreesWithSortOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng.index(trial < 50 ? 1000 : 40);
    std::vector<float> d(n);
    // coarse values so ties actually occur
    for (auto& v : d) v = static_cast<float>(static_cast<int>(rng.uniform(0, 20)));
    const std::size_t k = rng.index(n + 1);
    auto r = topk(Tensor<float>({n}, d), k);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d[a] > d[b]; });
    order.resize(k);
    ASSERT_EQ(r.indices, order);
  }
}

TEST(BilinearSample, GridNodeReturnsNodeValue) {
  // 2x3 map, 1 channel
  Tensor<float> map({2, 3, 1}, {0, 1, 2, 3, 4, 5});
  auto s = bilinear_sample(map, Tensor<float>({1, 2}, {(1 + 0.5f) / 3, (1 + 0.5f) / 2}));
  EXPECT_FLOAT_EQ(s.item(), 4.0f);
}

TEST(BilinearSample, CellMidpointInterpolates) {
  Tensor<double> map({2, 2, 1}, {0, 0, 1, 1});
  auto s = bilinear_sample(map, Tensor<double>({1, 2}, {0.5, 0.5}));
  EXPECT_DOUBLE_EQ(s.item(), 0.5);
}

TEST(BilinearSample, OutOfRangeClampsToBorder) {
  Tensor<double> map({2, 2, 1}, {1, 2, 3, 4});
  auto s = bilinear_sample(map, Tensor<double>({2, 2}, {-3.0, -3.0, 7.0, 0.25}));
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 2.0);
}

TEST(BilinearSample, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  auto map = random_tensor({4, 5, 3}, rng);
  auto pts = random_tensor({6, 2}, rng, 0.15, 0.85);
  auto w = random_tensor({6, 3}, rng);
  auto wrt_points = [&](const Tensor<double>& p) { return sum(mul(bilinear_sample(map, p), w)); };
  auto wrt_map = [&](const Tensor<double>& m) { return sum(mul(bilinear_sample(m, pts), w)); };
  EXPECT_LT(grad_check(wrt_points, pts, 1e-7), 1e-4);
  EXPECT_LT(grad_check(wrt_map, map), 1e-4);
}

TEST(GradCheck, SquareAtThree) {
  auto f = [](const Tensor<double>& x) { return sum(square(x)); };
  EXPECT_LT(grad_check(f, Tensor<double>({1}, {3.0})), 1e-6);
}

TEST(GradCheck, SumOfSoftmaxIsConstant) {
  Rng rng(2);
  auto x = random_tensor({1, 6}, rng, -3, 3);
  Tensor<double> leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  sum(softmax_rows(leaf)).backward();
  for (double g : leaf.grad()) EXPECT_LT(std::abs(g), 1e-6);
  auto f = [](const Tensor<double>& t) { return sum(softmax_rows(t)); };
  EXPECT_LT(grad_check(f, x), 1e-6);
}

TEST(GradCheck, NonFiniteOutputThrows) {
  auto f = [](const Tensor<double>& x) { return sum(log(x)); };
  EXPECT_THROW(grad_check(f, Tensor<double>({1}, {-1.0})), NumericError);
  EXPECT_THROW(grad_check(f, Tensor<double>({1}, {1.0}), 0.0), ArgumentError);
}

// Every differentiable op on small random inputs.
TEST(GradCheck, AllOpsWithinTolerance) {
  Rng rng(17);
  auto x = random_tensor({3, 4}, rng);
  auto y = random_tensor({3, 4}, rng);
  auto row = random_tensor({4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  auto weigh = [](const Tensor<double>& t, std::uint64_t seed) {
    Rng r(seed);
    return sum(mul(t, random_tensor(t.shape(), r)));
  };
  const std::vector<std::pair<const char*, std::function<Tensor<double>(const Tensor<double>&)>>> cases = {
      {"add", [&](const Tensor<double>& t) { return weigh(add(t, y), 1); }},
      {"add_row", [&](const Tensor<double>& t) { return weigh(add(y, reshape(slice_rows(t, 0, 1), {4})), 2); }},
      {"sub", [&](const Tensor<double>& t) { return weigh(sub(y, t), 3); }},
      {"mul", [&](const Tensor<double>& t) { return weigh(mul(t, t), 4); }},
      {"matmul", [&](const Tensor<double>& t) { return weigh(matmul(t, w), 5); }},
      {"linear", [&](const Tensor<double>& t) { return weigh(linear(t, w, Tensor<double>({5}, {1, 2, 3, 4, 5})), 6); }},
      {"layer_norm", [&](const Tensor<double>& t) { return weigh(layer_norm(t, row, row), 7); }},
      {"softmax", [&](const Tensor<double>& t) { return weigh(softmax_rows(t), 8); }},
      {"sigmoid", [&](const Tensor<double>& t) { return weigh(sigmoid(t), 9); }},
      {"tanh", [&](const Tensor<double>& t) { return weigh(tanh(t), 10); }},
      {"exp", [&](const Tensor<double>& t) { return weigh(exp(t), 11); }},
      {"log", [&](const Tensor<double>& t) { return weigh(log(add(t, Tensor<double>::scalar(2.0))), 12); }},
      {"transpose", [&](const Tensor<double>& t) { return weigh(transpose(t), 13); }},
      {"concat", [&](const Tensor<double>& t) { return weigh(concat_rows<double>({concat_cols<double>({t, y}), concat_cols<double>({y, t})}), 14); }},
      {"slice", [&](const Tensor<double>& t) { return weigh(slice_cols(t, 1, 2), 15); }},
      {"gather", [&](const Tensor<double>& t) { return weigh(gather_rows(t, {2, 0, 2}), 16); }},
      {"mean_groups", [&](const Tensor<double>& t) { return weigh(mean_groups(reshape(t, {6, 2}), 3), 17); }},
      {"sine_embed", [&](const Tensor<double>& t) { return weigh(sine_embed(reshape(t, {6, 2}), 8), 18); }},
      {"topk_rows", [&](const Tensor<double>& t) { return weigh(topk_rows(t, 2).values, 19); }},
      {"square", [&](const Tensor<double>& t) { return weigh(square(t), 20); }},
      {"add_n", [&](const Tensor<double>& t) { return weigh(add_n<double>({t, y, t}), 21); }},
  };
  for (const auto& [name, f] : cases) EXPECT_LT(grad_check(f, x), 1e-4) << name;
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return weigh(linear(x, t, Tensor<double>::zeros({5})), 22); }, w),
            1e-4);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return weigh(abs(t), 23); }, pos), 1e-4);
}

TEST(GroupedAttention, SingleGroupEqualsDenseAttention) {
  Rng rng(4);
  auto q = random_tensor({4, 6}, rng), k = random_tensor({4, 6}, rng), v = random_tensor({4, 6}, rng);
  auto out = grouped_attention(q, k, v, {{0, 1, 2, 3}}, 2);
  // dense oracle, head by head
  for (std::size_t h = 0; h < 2; ++h) {
    auto qh = slice_cols(q, h * 3, 3), kh = slice_cols(k, h * 3, 3), vh = slice_cols(v, h * 3, 3);
    auto p = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(3.0)));
    auto ref = matmul(p, vh);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out[i * 6 + h * 3 + c], ref[i * 3 + c], 1e-12);
  }
}

TEST(GroupedAttention, GroupsAreIsolatedAndGradientsMatch) {
  Rng rng(8);
  auto q = random_tensor({6, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
  std::vector<std::vector<std::size_t>> groups{{0, 2, 4}, {1, 3, 5}};
  AttnMask mask(3, 3);
  mask.set(0, 2, true);
  mask.set(2, 0, true);
  auto base = grouped_attention(q, k, v, groups, 2, &mask);
  auto v2 = random_tensor({6, 4}, rng);
  std::vector<double> mixed(v.data().begin(), v.data().end());
  for (std::size_t c = 0; c < 4; ++c) mixed[1 * 4 + c] = v2[1 * 4 + c];
  auto perturbed = grouped_attention(q, k, Tensor<double>({6, 4}, mixed), groups, 2, &mask);
  for (std::size_t t : {0, 2, 4})
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(base[t * 4 + c], perturbed[t * 4 + c]);
  Rng wr(9);
  auto w = random_tensor({6, 4}, wr);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(grouped_attention(t, k, v, groups, 2, &mask), w)); }, q), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(grouped_attention(q, t, v, groups, 2, &mask), w)); }, k), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(grouped_attention(q, k, t, groups, 2, &mask), w)); }, v), 1e-4);
}

TEST(DeformAttn, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  const std::size_t heads = 2, pts = 2, q = 3, d = 4;
  std::vector<LevelShape> levels{{4, 5}, {2, 3}};
  std::vector<Tensor<double>> values{random_tensor({20, d}, rng), random_tensor({6, d}, rng)};
  const std::size_t per = heads * levels.size() * pts;
  auto locs = random_tensor({q, per * 2}, rng, 0.2, 0.8);
  auto weights = random_tensor({q, per}, rng, 0.0, 1.0);
  auto w = random_tensor({q, d}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(ms_deform_attn(values, levels, t, weights, heads, pts), w)); }, locs, 1e-7), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(ms_deform_attn(values, levels, locs, t, heads, pts), w)); }, weights), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(ms_deform_attn<double>({t, values[1]}, levels, locs, weights, heads, pts), w)); }, values[0]), 1e-4);
}

TEST(Patchify, LayoutAndUnfold) {
  std::vector<float> img(4 * 4 * 1);
  std::iota(img.begin(), img.end(), 0.0f);
  auto p = patchify(Tensor<float>({4, 4, 1}, img), 2);
  ASSERT_EQ(p.shape(), (Shape{4, 4}));
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().begin() + 4), (std::vector<float>{0, 1, 4, 5}));
  EXPECT_THROW(patchify(Tensor<float>({5, 4, 1}, std::vector<float>(20)), 2), ArgumentError);
  auto u = unfold3x3(Tensor<float>({4, 1}, {1, 2, 3, 4}), 2, 2);
  // pixel (0,0): neighbourhood rows -1..1, cols -1..1
  EXPECT_EQ(std::vector<float>(u.data().begin(), u.data().begin() + 9), (std::vector<float>{0, 0, 0, 0, 1, 2, 0, 3, 4}));
  Rng rng(1);
  auto x = random_tensor({6, 2}, rng);
  auto w = random_tensor({6, 18}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return sum(mul(unfold3x3(t, 2, 3), w)); }, x), 1e-6);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  Rng a(21), b(21);
  auto x1 = random_tensor({5, 8}, a), x2 = random_tensor({5, 8}, b);
  auto f = [](const Tensor<double>& x) {
    return grouped_attention(x, x, x, {{0, 1, 2}, {3, 4}}, 2);
  };
  auto y1 = f(x1), y2 = f(x2);
  EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}
