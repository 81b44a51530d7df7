#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "detkit/criterion.hpp"
#include "support/oracles.hpp"

using namespace detkit;
using namespace detkit::criterion;
using model::DetectionOutput;
using model::LayerOutput;
using model::Targets;

namespace {

Targets two_targets() {
  Targets t;
  t.labels = {0, 2};
  t.boxes = Tensor::from({2, 4}, {0.3, 0.3, 0.2, 0.2, 0.7, 0.6, 0.3, 0.2});
  t.crowd = {0, 0};
  return t;
}

DetectionOutput random_output(std::mt19937_64& rng, int layers, int64_t q, int64_t c) {
  DetectionOutput o;
  for (int l = 0; l < layers; ++l)
    o.per_layer.push_back({Var(Tensor::normal({q, c}, rng)), Var(Tensor::uniform({q, 4}, rng, 0.15, 0.6))});
  return o;
}

}  // namespace

TEST(FocalLoss, HalfProbabilityPositive) {
  // alpha * (1 - p)^gamma * -log p at p = 1/2.
  const long double expected = 0.25L * 0.25L * std::log(2.0L);
  Var l = focal_loss(Var(Tensor::from({1, 1}, {0.0})), {0}, 0.25, 2.0, 1.0);
  EXPECT_NEAR(l.value().item(), static_cast<double>(expected), 1e-15);
  EXPECT_NEAR(l.value().item(), 0.04332, 1e-5);
}

TEST(FocalLoss, DegeneratesToBinaryCrossEntropy) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    Tensor logits = Tensor::normal({5, 3}, rng, 3.0);
    std::vector<int64_t> cls{0, -1, 2, 1, -1};
    double bce = 0;
    for (int64_t q = 0; q < 5; ++q)
      for (int64_t c = 0; c < 3; ++c) {
        const double p = 1.0 / (1.0 + std::exp(-logits.at(q, c)));
        bce -= cls[q] == c ? std::log(p) : std::log(1 - p);
      }
    EXPECT_NEAR(focal_loss(Var(logits), cls, -1.0, 0.0, 1.0).value().item(), bce, 1e-7);
  }
}

TEST(FocalLoss, ConfidentCorrectPredictionsVanishMonotonically) {
  double prev = INFINITY;
  for (double m = 0.5; m < 40; m *= 1.6) {
    const double l = focal_loss(Var(Tensor::from({2, 2}, {m, -m, -m, -m})), {0, -1}, 0.25, 2.0, 1.0).value().item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(FocalLoss, FiniteForExtremeLogits) {
  Var l = focal_loss(Var(Tensor::from({2, 2}, {1e4, -1e4, -1e4, 1e4})), {1, 0}, 0.25, 2.0, 2.0);
  EXPECT_TRUE(std::isfinite(l.value().item()));
  EXPECT_THROW(focal_loss(Var(Tensor::from({1, 1}, {0.0})), {0}, 0.25, -1.0, 1.0), BadParams);
}

TEST(BoxLosses, Fixtures) {
  Tensor t = Tensor::from({1, 4}, {0.5, 0.5, 0.2, 0.2});
  auto same = box_losses(Var(t), t);
  EXPECT_EQ(same.l1.value().item(), 0.0);
  EXPECT_NEAR(same.giou.value().item(), 0.0, 1e-15);
  auto r = box_losses(Var(Tensor::from({1, 4}, {0.5, 0.5, 0.4, 0.4})), t);
  EXPECT_NEAR(r.l1.value().item(), 0.4, 1e-15);
  // The target lies inside the prediction: IoU = GIoU = 0.04 / 0.16.
  EXPECT_NEAR(r.giou.value().item(), 0.75, 1e-15);
  auto e = box_losses(Var(Tensor(Shape{0, 4})), Tensor(Shape{0, 4}));
  EXPECT_TRUE(e.empty);
  EXPECT_EQ(e.l1.value().item(), 0.0);
}

TEST(BoxLosses, Gradients) {
  Tensor tgt = Tensor::from({3, 4}, {0.5, 0.5, 0.2, 0.2, 0.3, 0.6, 0.3, 0.1, 0.6, 0.4, 0.25, 0.35});
  auto r = oracle::check_gradients(
      [&](const std::vector<Var>& v) {
        auto b = box_losses(v[0], tgt);
        return ops::add(b.l1, b.giou);
      },
      {Tensor::from({3, 4}, {0.45, 0.52, 0.32, 0.18, 0.33, 0.58, 0.2, 0.15, 0.9, 0.1, 0.1, 0.1})});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(SetCriterionTest, EmptyTargetsOnlyClassify) {
  std::mt19937_64 rng(2);
  SetCriterion crit(3, LossWeights{});
  auto out = random_output(rng, 2, 6, 3);
  auto rep = crit({out}, {Targets{}});
  for (const auto& [k, v] : rep.components) {
    if (k.rfind("loss_class", 0) == 0) EXPECT_GT(v, 0.0) << k;
    else EXPECT_EQ(v, 0.0) << k;
  }
}

TEST(SetCriterionTest, WeightsScaleTheirComponentsOnly) {
  std::mt19937_64 rng(3);
  auto out = random_output(rng, 3, 6, 3);
  LossWeights w;
  SetCriterion base(3, w, {}, false);
  w.class_weight = 2.0;
  SetCriterion doubled(3, w, {}, false);
  auto a = base({out}, {two_targets()});
  auto b = doubled({out}, {two_targets()});
  ASSERT_EQ(a.components.size(), b.components.size());
  for (const auto& [k, v] : a.components) {
    if (k.rfind("loss_class", 0) == 0) EXPECT_NEAR(b.components.at(k), 2 * v, 1e-12) << k;
    else EXPECT_EQ(b.components.at(k), v) << k;
  }
  double sum = 0;
  for (const auto& [k, v] : b.components) sum += v;
  EXPECT_NEAR(b.total_value(), sum, 1e-12);
}

TEST(SetCriterionTest, MatcherClassWeightTiedByDefault) {
  LossWeights w;
  w.class_weight = 2.0;
  EXPECT_EQ(SetCriterion(3, w).matcher().weights().class_weight, 2.0);
  EXPECT_EQ(SetCriterion(3, w, {}, false).matcher().weights().class_weight, 1.0);
}

TEST(SetCriterionTest, OneLossGroupPerDecoderLayerPlusEncoder) {
  std::mt19937_64 rng(4);
  SetCriterion crit(3, LossWeights{});
  auto out = random_output(rng, 4, 6, 3);
  out.encoder_proposals = LayerOutput{Var(Tensor::normal({6, 3}, rng)), Var(Tensor::uniform({6, 4}, rng, 0.2, 0.5))};
  auto rep = crit({out}, {two_targets()});
  std::set<std::string> groups;
  for (const auto& [k, v] : rep.components)
    if (k.rfind("loss_bbox", 0) == 0) groups.insert(k);
  EXPECT_EQ(groups.size(), 5u);
  EXPECT_TRUE(groups.count("loss_bbox_enc"));

  LossWeights no_aux;
  no_aux.aux_enabled = false;
  auto rep2 = SetCriterion(3, no_aux)({random_output(rng, 4, 6, 3)}, {two_targets()});
  EXPECT_EQ(rep2.components.size(), 3u);
}

TEST(SetCriterionTest, PerfectDenoisingHasZeroBoxTermsAndSkipsMatcher) {
  std::mt19937_64 rng(5);
  Targets t = two_targets();
  auto out = random_output(rng, 2, 6, 3);
  SetCriterion plain(3, LossWeights{});
  plain({out}, {t});
  const int64_t calls_without_dn = plain.matcher().calls();

  model::DenoisingMeta meta;
  meta.num_groups = 2;
  meta.num_gt = 2;
  meta.queries_per_group = 2;
  meta.target_index = {0, 1, 0, 1};
  Tensor boxes({4, 4});
  Tensor logits({4, 3}, -50.0);
  for (int q = 0; q < 4; ++q) {
    for (int c = 0; c < 4; ++c) boxes.at(q, c) = t.boxes.at(q % 2, c);
    logits.at(q, t.labels[static_cast<size_t>(q % 2)]) = 50.0;
  }
  for (int l = 0; l < 2; ++l) out.dn_per_layer.push_back({Var(logits), Var(boxes)});
  out.dn = meta;
  SetCriterion crit(3, LossWeights{});
  auto rep = crit({out}, {t});
  EXPECT_EQ(crit.matcher().calls(), calls_without_dn);
  EXPECT_NEAR(rep.components.at("loss_bbox_dn"), 0.0, 1e-15);
  EXPECT_NEAR(rep.components.at("loss_giou_dn"), 0.0, 1e-12);
  EXPECT_LT(rep.components.at("loss_class_dn"), 1e-12);
  EXPECT_TRUE(rep.components.count("loss_bbox_dn_0"));
}
