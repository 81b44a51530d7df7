#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>
#include <thread>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "detkit/evalbench.hpp"
#include "detkit/model/encoder.hpp"
#include "support/ap_fixture.hpp"

using namespace detkit;
using namespace detkit::evalbench;

namespace {

using apfix::Fixture;
using apfix::random_fixture;

void expect_metrics(const ApMetrics& m, const std::array<double, 6>& want, double tol = 1e-6) {
  const auto got = m.as_vector();
  const char* names[] = {"AP", "AP50", "AP75", "APs", "APm", "APl"};
  for (size_t i = 0; i < 6; ++i) EXPECT_NEAR(got[i], want[i], tol) << names[i];
}

}  // namespace

TEST(Ap, HandFixtureOneMissOneClutter) {
  // Ranked TP, FP, TP against two objects: precision envelope 1 up to
  // recall 0.5, then 2/3.
  Fixture f;
  f.gts = {{0, 0, {10, 10, 60, 60}}, {0, 0, {100, 100, 150, 160}}};
  f.dets = {{0, 0, {10, 10, 60, 60}, 0.9}, {0, 0, {300, 300, 350, 350}, 0.8}, {0, 0, {100, 100, 150, 160}, 0.7}};
  const double ap = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
  expect_metrics(f.evaluate(), {ap, ap, ap, -1, ap, -1});
  expect_metrics(f.evaluate(), oracle::coco_metrics(f.dets, f.gts, 1));
}

TEST(Ap, HandFixturePartialOverlap) {
  // IoU 0.625: a hit for thresholds 0.50..0.60, a miss from 0.65 on.
  Fixture f;
  f.gts = {{0, 0, {0, 0, 100, 100}}};
  f.dets = {{0, 0, {0, 0, 100, 62.5}, 0.5}};
  ASSERT_NEAR(oracle::iou_xyxy(f.dets[0].box, f.gts[0].box), 0.625, 1e-12);
  expect_metrics(f.evaluate(), {0.3, 1.0, 0.0, -1, -1, 0.3});
}

TEST(Ap, HandFixtureTwoClassesAveraged) {
  Fixture f;
  f.classes = 3;  // class 2 has no objects and is skipped
  f.gts = {{0, 0, {0, 0, 20, 20}}, {0, 1, {50, 50, 70, 70}}};
  f.dets = {{0, 0, {0, 0, 20, 20}, 0.9}, {0, 0, {50, 50, 70, 70}, 0.95}};
  // class 0: FP then TP -> precision 1/2 at full recall; class 1: missed.
  const double ap = (0.5 + 0.0) / 2;
  const auto m = f.evaluate();
  expect_metrics(m, {ap, ap, ap, ap, -1, -1});
  EXPECT_EQ(m.skipped_classes, std::vector<std::string>{"2"});
}

TEST(Ap, MatchesOracleOnRandomFixtures) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 50; ++t) {
    Fixture f = random_fixture(rng);
    expect_metrics(f.evaluate(), oracle::coco_metrics(f.dets, f.gts, f.classes));
  }
}

TEST(Ap, PerfectDetectorScoresOneWhereDefined) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    Fixture f = random_fixture(rng);
    f.dets.clear();
    for (const auto& g : f.gts) f.dets.push_back({g.image, g.cls, g.box, 0.99});
    for (double v : f.evaluate().as_vector())
      if (v != -1.0) EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(Ap, NoPredictionsScoreZero) {
  std::mt19937_64 rng(4);
  Fixture f = random_fixture(rng);
  f.dets.clear();
  EXPECT_EQ(f.evaluate().ap, 0.0);
  EXPECT_THROW(coco_ap_evaluate({}, f.ground_truth(), 0), BadArgument);
}

TEST(Ap, InvariantUnderMonotoneScoreMaps) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    Fixture f = random_fixture(rng);
    const auto base = f.evaluate().as_vector();
    for (auto& d : f.dets) d.score = std::pow(d.score, 3) * 0.5 + 0.1;
    const auto mapped = f.evaluate().as_vector();
    for (size_t i = 0; i < 6; ++i) EXPECT_EQ(base[i], mapped[i]);
  }
}

TEST(Ap, DuplicatesNeverHelp) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    Fixture f = random_fixture(rng);
    if (f.dets.empty()) continue;
    const auto base = f.evaluate().as_vector();
    auto d = f.dets[rng() % f.dets.size()];
    d.score *= 0.999;
    f.dets.push_back(d);
    const auto dup = f.evaluate().as_vector();
    for (size_t i = 0; i < 6; ++i) EXPECT_LE(dup[i], base[i] + 1e-12);
  }
}

TEST(Ap, CrowdRegionsAbsorbDetections) {
  std::vector<ImageGroundTruth> gt(1);
  gt[0].boxes = Tensor::from({2, 4}, {0, 0, 50, 50, 100, 100, 300, 300});
  gt[0].labels = {0, 0};
  gt[0].crowd = {0, 1};
  std::vector<ImageDetections> p(1);
  p[0].boxes = Tensor::from({3, 4}, {0, 0, 50, 50, 110, 110, 150, 150, 200, 200, 240, 240});
  p[0].scores = {0.5, 0.9, 0.8};
  p[0].labels = {0, 0, 0};
  EXPECT_NEAR(coco_ap_evaluate(p, gt, 1).ap, 1.0, 1e-12);
}

TEST(Params, ClosedForms) {
  nn::Linear lin(7, 5);
  EXPECT_EQ(count_parameters(lin).total, 7 * 5 + 5);
  nn::MLP mlp(4, 8, 2, 3);
  EXPECT_EQ(count_parameters(mlp).total, (4 * 8 + 8) + (8 * 8 + 8) + (8 * 2 + 2));
  const int64_t d = 16, f = 40;
  model::TransformerEncoderLayer layer(d, 4, f);
  EXPECT_EQ(count_parameters(layer).total, 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d);
  const int64_t h = 4, l = 2, p = 3;
  model::DeformableAttention da(d, static_cast<int>(h), static_cast<int>(l), static_cast<int>(p));
  EXPECT_EQ(count_parameters(da).total, (d * h * l * p * 2 + h * l * p * 2) + (d * h * l * p + h * l * p) + 2 * (d * d + d));
  mlp.freeze();
  EXPECT_EQ(count_parameters(mlp).trainable, 0);
}

TEST(Flops, ThreeLayerLedgerIsExact) {
  nn::MLP mlp(4, 8, 2, 3);
  std::mt19937_64 rng(1);
  const std::vector<int64_t> rows = {5, 7};
  NoGradGuard ng;
  auto st = estimate_flops([&](size_t i) { mlp.forward(Var(Tensor::normal({rows[i], 4}, rng))); }, 2);
  const double per_row = 4 * 8 + 8 * 8 + 8 * 2;
  ASSERT_EQ(st.per_input.size(), 2u);
  EXPECT_EQ(st.per_input[0], 5 * per_row);
  EXPECT_EQ(st.per_input[1], 7 * per_row);
  EXPECT_EQ(st.mean, 6 * per_row);
  EXPECT_EQ(st.std, per_row);
  EXPECT_EQ(st.by_kind.at("linear"), 12 * per_row);

  FlopRules doubled = FlopRules::defaults();
  doubled.set("linear", 2.0);
  EXPECT_EQ(estimate_flops([&](size_t) { mlp.forward(Var(Tensor::normal({5, 4}, rng))); }, 1, doubled).mean,
            10 * per_row);
  EXPECT_THROW(estimate_flops([&](size_t) { mlp.forward(Var(Tensor::normal({5, 4}, rng))); }, 1, FlopRules{}),
               UnregisteredLayer);
}

TEST(Flops, CellFormat) {
  FlopStats st;
  st.mean = 86.04e9;
  st.std = 1.26e9;
  EXPECT_EQ(st.gflops_cell(), "86.0 ± 1.3");
}

TEST(Fps, SleepStubNearHundred) {
  auto st = measure_fps([] { std::this_thread::sleep_for(std::chrono::milliseconds(10)); }, 2, 30);
  EXPECT_NEAR(st.fps, 100.0, 10.0);
  EXPECT_NEAR(st.median_ms, 10.0, 1.5);
  EXPECT_EQ(st.timed_iters, 30);
  EXPECT_THROW(measure_fps([] {}, 0, 9), BadArgument);
}

TEST(Visualize, WritesDecodableImage) {
  Tensor img({40, 50, 3}, 0.0);
  model::Detections det;
  det.boxes = Tensor::from({2, 4}, {5, 10, 30, 35, 0, 0, 10, 10});
  det.scores = {0.9, 0.1};
  det.labels = {1, 0};
  auto path = std::filesystem::temp_directory_path() / "detkit_vis" / "out.png";
  std::filesystem::remove(path);
  visualize_predictions(img, det, {"a", "b"}, 0.5, path);
  cv::Mat m = cv::imread(path.string());
  ASSERT_FALSE(m.empty());
  EXPECT_EQ(m.rows, 40);
  EXPECT_EQ(m.cols, 50);
  EXPECT_NE(m.at<cv::Vec3b>(35, 20), cv::Vec3b(0, 0, 0));  // bottom edge of the kept box
  EXPECT_EQ(m.at<cv::Vec3b>(39, 49), cv::Vec3b(0, 0, 0));
  EXPECT_EQ(m.at<cv::Vec3b>(5, 0), cv::Vec3b(0, 0, 0));  // below-floor box not drawn
}

TEST(Report, ThirteenColumnsAndCsvRoundTrip) {
  ASSERT_EQ(report_columns().size(), 13u);
  BenchmarkRecord a;
  a.model_name = "toy, \"quoted\"";
  a.epochs = 12;
  ApMetrics m;
  m.ap = 0.4123;
  m.ap50 = 0.61;
  m.ap75 = 0.44;
  m.ap_medium = 0.5;
  a.ap = m;
  a.params = 43210;
  a.gflops_mean = 0.0123;
  a.gflops_std = 0.0004;
  a.fps = 17.25;
  a.peak_memory = 1 << 20;
  a.wall_hours = 0.01;
  BenchmarkRecord b;
  b.model_name = "broken";
  b.error = "UnregisteredLayer: no rule";

  const std::string md = emit_report({a, b}, ReportFormat::kMarkdown);
  const std::string header = md.substr(0, md.find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), '|'), 14);
  EXPECT_NE(md.find("0.0123 ± 0.0004"), std::string::npos);
  EXPECT_NE(md.find("41.2"), std::string::npos);

  const std::string csv = emit_report({a, b}, ReportFormat::kCsv);
  auto back = parse_report_csv(csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(same_record(back[0], a));
  EXPECT_TRUE(same_record(back[1], b));
  EXPECT_EQ(emit_report(back, ReportFormat::kCsv), csv);
  EXPECT_THROW(parse_report_csv("a,b\n1,2\n"), ReportParseError);
}

TEST(ResultsJson, XywhWithCategoryIds) {
  ImageDetections d;
  d.image_id = 7;
  d.boxes = Tensor::from({1, 4}, {10, 20, 40, 60});
  d.scores = {0.5};
  d.labels = {1};
  const auto j = nlohmann::json::parse(results_json({d}, {3, 9}));
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["image_id"], 7);
  EXPECT_EQ(j[0]["category_id"], 9);
  EXPECT_EQ(j[0]["bbox"].get<std::vector<double>>(), (std::vector<double>{10, 20, 30, 40}));
  EXPECT_EQ(j[0]["score"], 0.5);
}
