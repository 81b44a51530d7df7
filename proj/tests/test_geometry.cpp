#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "detkit/geometry.hpp"
#include "support/oracles.hpp"

using namespace detkit;
using namespace detkit::geometry;

TEST(ConvertFormat, IdentitySquareOnUnitImage) {
  auto b = BoxArray::cxcywh({{0.5, 0.5, 1, 1}}, ImageSize{1, 1});
  auto x = convert_format(b, BoxFormat::kXyxyAbs);
  EXPECT_EQ(x.box(0), (std::array<double, 4>{0, 0, 1, 1}));
}

TEST(ConvertFormat, QuarterBoxOn100px) {
  auto b = BoxArray::cxcywh({{0.25, 0.25, 0.5, 0.5}}, ImageSize{100, 100});
  auto x = convert_format(b, BoxFormat::kXyxyAbs);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x.box(0)[i], (std::array<double, 4>{0, 0, 50, 50})[i], 1e-12);
}

TEST(ConvertFormat, NeedsImageSize) {
  auto b = BoxArray::xyxy({{0, 0, 1, 1}});
  EXPECT_THROW(convert_format(b, BoxFormat::kCxcywhNorm), MissingImageSize);
}

TEST(ConvertFormat, RoundTripRandom) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const ImageSize size{50.0 + rng() % 500, 50.0 + rng() % 500};
    auto b = BoxArray::xyxy({oracle::random_xyxy(rng, std::min(size.width, size.height))}, size);
    auto back = convert_format(convert_format(b, BoxFormat::kCxcywhNorm), BoxFormat::kXyxyAbs);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(back.box(0)[i], b.box(0)[i], 1e-6 * std::max(1.0, std::abs(b.box(0)[i])));
  }
}

TEST(BoxConverterTest, AppliesFormat) {
  BoxConverter c(parse_box_format("xyxy"));
  EXPECT_EQ(c.format(), BoxFormat::kXyxyAbs);
  EXPECT_THROW(parse_box_format("yxyx"), InvalidBoxes);
}

TEST(BoxArrayTest, ValidateRejectsInverted) {
  EXPECT_THROW(BoxArray::xyxy({{2, 0, 1, 1}}).validate(), InvalidBoxes);
  EXPECT_THROW(BoxArray::cxcywh({{0.5, 0.5, 1.5, 0.2}}, ImageSize{1, 1}).validate(), InvalidBoxes);
}

TEST(BoxIou, Fixtures) {
  auto a = BoxArray::xyxy({{0, 0, 2, 2}, {0, 0, 1, 1}});
  auto b = BoxArray::xyxy({{1, 1, 3, 3}, {5, 5, 6, 6}, {0, 0, 1, 1}});
  Tensor iou = box_iou(a, b);
  EXPECT_NEAR(iou.at(0, 0), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou.at(1, 1), 0.0);
  EXPECT_EQ(iou.at(1, 2), 1.0);
}

TEST(BoxIou, ZeroAreaIsZeroEvenAgainstItself) {
  auto z = BoxArray::xyxy({{1, 1, 1, 3}});
  EXPECT_EQ(box_iou(z, z).at(0, 0), 0.0);
}

TEST(BoxIou, Symmetric) {
  std::mt19937_64 rng(5);
  std::vector<std::array<double, 4>> va, vb;
  for (int i = 0; i < 9; ++i) va.push_back(oracle::random_xyxy(rng, 20));
  for (int i = 0; i < 6; ++i) vb.push_back(oracle::random_xyxy(rng, 20));
  Tensor ab = box_iou(BoxArray::xyxy(va), BoxArray::xyxy(vb));
  Tensor ba = box_iou(BoxArray::xyxy(vb), BoxArray::xyxy(va));
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 6; ++j) {
      EXPECT_EQ(ab.at(i, j), ba.at(j, i));
      EXPECT_NEAR(ab.at(i, j), oracle::iou_xyxy(va[i], vb[j]), 1e-12);
    }
}

TEST(Giou, Fixtures) {
  auto a = BoxArray::xyxy({{0, 0, 1, 1}});
  EXPECT_NEAR(generalized_iou(a, BoxArray::xyxy({{1, 1, 2, 2}})).at(0, 0), -0.5, 1e-15);
  EXPECT_EQ(generalized_iou(a, a).at(0, 0), 1.0);
}

TEST(Giou, NeverAboveIouAndDecreasesWithSeparation) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 300; ++t) {
    auto a = BoxArray::xyxy({oracle::random_xyxy(rng, 30)});
    auto b = BoxArray::xyxy({oracle::random_xyxy(rng, 30)});
    EXPECT_LE(generalized_iou(a, b).at(0, 0), box_iou(a, b).at(0, 0) + 1e-15);
  }
  auto a = BoxArray::xyxy({{0, 0, 1, 1}});
  double prev = 2;
  for (double d = 1; d < 1000; d *= 1.5) {
    const double g = generalized_iou(a, BoxArray::xyxy({{d, 0, d + 1, 1}})).at(0, 0);
    EXPECT_LT(g, prev);
    EXPECT_GT(g, -1.0);
    prev = g;
  }
  EXPECT_LT(prev, -0.99);
}

TEST(Hungarian, AntiDiagonal) {
  auto a = hungarian_match(Tensor::from({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(a.total_cost, 0.0);
  EXPECT_EQ(a.pairs, (std::vector<std::pair<int64_t, int64_t>>{{0, 1}, {1, 0}}));
}

TEST(Hungarian, AllZeroIsAPermutation) {
  auto a = hungarian_match(Tensor(Shape{3, 3}));
  EXPECT_EQ(a.total_cost, 0.0);
  std::set<int64_t> rows, cols;
  for (auto [r, c] : a.pairs) rows.insert(r), cols.insert(c);
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_EQ(cols.size(), 3u);
}

TEST(Hungarian, RectangularMatchesBruteForce) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 7);
  for (int t = 0; t < 150; ++t) {
    const int m = dim(rng), n = dim(rng);
    Tensor c = Tensor::uniform({m, n}, rng, -3, 5);
    auto a = hungarian_match(c);
    EXPECT_EQ(static_cast<int>(a.pairs.size()), std::min(m, n));
    std::set<int64_t> rows, cols;
    double sum = 0;
    for (auto [r, col] : a.pairs) {
      rows.insert(r), cols.insert(col);
      sum += c.at(r, col);
    }
    EXPECT_EQ(rows.size(), a.pairs.size());
    EXPECT_EQ(cols.size(), a.pairs.size());
    EXPECT_NEAR(sum, a.total_cost, 1e-12);
    EXPECT_NEAR(a.total_cost, oracle::brute_force_min_cost(c), 1e-9);
  }
}

TEST(Hungarian, EmptyAndNonFinite) {
  EXPECT_TRUE(hungarian_match(Tensor(Shape{0, 3})).pairs.empty());
  EXPECT_THROW(hungarian_match(Tensor::from({1, 2}, {0, NAN})), NonFiniteCost);
  EXPECT_THROW(hungarian_match(Tensor::from({1, 1}, {INFINITY})), NonFiniteCost);
}

TEST(MatchCost, PerfectMatchLeavesOnlyClassTerm) {
  Tensor prob = Tensor::from({1, 2}, {1.0, 0.0});
  auto boxes = BoxArray::cxcywh({{0.5, 0.5, 0.2, 0.2}}, ImageSize{1, 1});
  MatchWeights w{1, 1, 1, 0.25, 2.0};
  Tensor c = build_match_cost(prob, boxes, {0}, boxes, w);
  EXPECT_NEAR(c.at(0, 0), focal_class_cost(1.0, 0.25, 2.0), 1e-12);
  w = {0, 1, 0, 0.25, 2.0};
  EXPECT_NEAR(build_match_cost(prob, boxes, {0}, boxes, w).at(0, 0), 0.0, 1e-12);
}

TEST(MatchCost, ClassColumnScalesWithWeight) {
  std::mt19937_64 rng(2);
  Tensor prob = Tensor::uniform({3, 4}, rng, 0.05, 0.95);
  auto pred = BoxArray::cxcywh({{0.3, 0.3, 0.2, 0.2}, {0.6, 0.5, 0.3, 0.1}, {0.5, 0.7, 0.2, 0.4}}, ImageSize{1, 1});
  auto tgt = BoxArray::cxcywh({{0.35, 0.3, 0.2, 0.25}, {0.5, 0.65, 0.2, 0.3}, {0.6, 0.5, 0.3, 0.1}}, ImageSize{1, 1});
  const std::vector<int64_t> labels{1, 3, 0};
  Tensor c2 = build_match_cost(prob, pred, labels, tgt, {2, 5, 2, 0.25, 2});
  Tensor c1 = build_match_cost(prob, pred, labels, tgt, {1, 5, 2, 0.25, 2});
  Tensor cls = build_match_cost(prob, pred, labels, tgt, {1, 0, 0, 0.25, 2});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      EXPECT_NEAR(c2.at(i, j) - c1.at(i, j), cls.at(i, j), 1e-12);
      EXPECT_NEAR(cls.at(i, j), focal_class_cost(prob.at(i, labels[j]), 0.25, 2), 1e-12);
    }
  EXPECT_THROW(build_match_cost(Tensor(Shape{2, 4}), pred, labels, tgt, {}), ShapeMismatch);
}

TEST(Nms, Fixtures) {
  auto one = BoxArray::xyxy({{0, 0, 1, 1}});
  EXPECT_EQ(nms(one, {0.3}, 0.8), (std::vector<int64_t>{0}));
  auto dup = BoxArray::xyxy({{0, 0, 2, 2}, {0, 0, 2, 2}});
  EXPECT_EQ(nms(dup, {0.9, 0.8}, 0.8), (std::vector<int64_t>{0}));
  auto far = BoxArray::xyxy({{0, 0, 2, 2}, {1, 1, 3, 3}});
  EXPECT_EQ(nms(far, {0.8, 0.9}, 0.8), (std::vector<int64_t>{1, 0}));
  EXPECT_THROW(nms(one, {0.3}, 0.0), BadThreshold);
  EXPECT_THROW(nms(one, {0.3}, 1.5), BadThreshold);
}

TEST(Nms, TiesBrokenByIndex) {
  auto dup = BoxArray::xyxy({{0, 0, 2, 2}, {0, 0, 2, 2}, {5, 5, 6, 6}});
  EXPECT_EQ(nms(dup, {0.5, 0.5, 0.5}, 0.5), (std::vector<int64_t>{0, 2}));
}

TEST(Nms, IdempotentAndMatchesReference) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 40; ++t) {
    std::vector<std::array<double, 4>> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 60; ++i) {
      boxes.push_back(oracle::random_xyxy(rng, 40, 4));
      scores.push_back(static_cast<double>(rng() % 20) / 20.0);  // many ties
    }
    const double thr = 0.3 + 0.1 * (t % 6);
    auto kept = nms(BoxArray::xyxy(boxes), scores, thr);
    EXPECT_EQ(kept, oracle::reference_nms(boxes, scores, thr));
    std::vector<std::array<double, 4>> kb;
    std::vector<double> ks;
    for (auto k : kept) kb.push_back(boxes[k]), ks.push_back(scores[k]);
    auto again = nms(BoxArray::xyxy(kb), ks, thr);
    EXPECT_EQ(again.size(), kept.size());
  }
}

TEST(Nms, PerClassOnlySuppressesSameLabel) {
  auto dup = BoxArray::xyxy({{0, 0, 2, 2}, {0, 0, 2, 2}, {0, 0, 2, 2}});
  EXPECT_EQ(batched_nms(dup, {0.9, 0.8, 0.7}, {0, 1, 0}, 0.8), (std::vector<int64_t>{0, 1}));
}
