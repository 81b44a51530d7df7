#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "detkit/data.hpp"
#include "support/toy.hpp"

using namespace detkit;
using namespace detkit::data;
using geometry::BoxArray;
using geometry::ImageSize;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("detkit_data_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Sample blank(int64_t h, int64_t w, std::vector<std::array<double, 4>> boxes, std::vector<int64_t> labels) {
  Sample s;
  s.image = Tensor({h, w, 3}, 0.25);
  s.boxes = BoxArray::xyxy(std::move(boxes), ImageSize{static_cast<double>(h), static_cast<double>(w)});
  s.crowd.assign(labels.size(), 0);
  s.labels = std::move(labels);
  return s;
}

void expect_valid(const Sample& s) {
  for (int64_t k = 0; k < s.boxes.size(); ++k) {
    auto b = s.boxes.box(k);
    EXPECT_LE(0.0, b[0]);
    EXPECT_LE(0.0, b[1]);
    EXPECT_LT(b[0], b[2]);
    EXPECT_LT(b[1], b[3]);
    EXPECT_LE(b[2], static_cast<double>(s.width()) + 1e-9);
    EXPECT_LE(b[3], static_cast<double>(s.height()) + 1e-9);
  }
  EXPECT_EQ(static_cast<size_t>(s.boxes.size()), s.labels.size());
}

}  // namespace

TEST(Coco, MinimalFile) {
  auto d = scratch("minimal");
  std::ofstream(d / "a.json") << R"({"images":[{"id":4,"file_name":"x.png","height":50,"width":60}],
    "annotations":[{"id":1,"image_id":4,"category_id":7,"bbox":[10,10,20,20],"area":400,"iscrowd":0},
                   {"id":2,"image_id":4,"category_id":9,"bbox":[0,0,5,5],"area":25,"iscrowd":1},
                   {"id":3,"image_id":4,"category_id":1,"bbox":[1,2,3,4],"area":12,"iscrowd":0}],
    "categories":[{"id":9,"name":"c"},{"id":1,"name":"a"},{"id":7,"name":"b"}]})";
  Dataset ds = load_coco_annotations(d / "a.json", d, false);
  ASSERT_EQ(ds.samples.size(), 1u);
  EXPECT_EQ(ds.category_ids, (std::vector<int64_t>{1, 7, 9}));
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"a", "b", "c"}));
  const Sample& s = ds.samples[0];
  EXPECT_EQ(s.height(), 50);
  EXPECT_EQ(s.width(), 60);
  EXPECT_EQ(s.boxes.box(0), (std::array<double, 4>{10, 10, 30, 30}));
  EXPECT_EQ(s.labels, (std::vector<int64_t>{1, 2, 0}));
  EXPECT_EQ(s.crowd, (std::vector<uint8_t>{0, 1, 0}));
  EXPECT_THROW(load_coco_annotations(d / "a.json", d, true), MissingImage);
}

TEST(Coco, SchemaErrors) {
  auto d = scratch("schema");
  std::ofstream(d / "bad_ref.json") << R"({"images":[{"id":1,"file_name":"x.png","height":5,"width":5}],
    "annotations":[{"id":1,"image_id":2,"category_id":1,"bbox":[0,0,1,1],"area":1,"iscrowd":0}],
    "categories":[{"id":1,"name":"a"}]})";
  EXPECT_THROW(load_coco_annotations(d / "bad_ref.json", d, false), SchemaError);
  std::ofstream(d / "no_cats.json") << R"({"images":[],"annotations":[]})";
  EXPECT_THROW(load_coco_annotations(d / "no_cats.json", d, false), SchemaError);
  std::ofstream(d / "garbage.json") << "{not json";
  EXPECT_THROW(load_coco_annotations(d / "garbage.json", d, false), SchemaError);
}

TEST(Shapes, DeterministicPerSeed) {
  ShapesOptions o;
  o.num_images = 6;
  Dataset a = generate_shapes_dataset(o), b = generate_shapes_dataset(o);
  o.seed = 1;
  Dataset c = generate_shapes_dataset(o);
  ASSERT_EQ(a.samples.size(), 6u);
  bool differs = false;
  for (size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_TRUE(same_annotations(a.samples[i], b.samples[i]));
    differs = differs || !(a.samples[i].image == c.samples[i].image);
    EXPECT_GE(a.samples[i].boxes.size(), 1);
    EXPECT_LE(a.samples[i].boxes.size(), o.max_objects);
    expect_valid(a.samples[i]);
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(to_coco_json(a), to_coco_json(b));
}

TEST(Shapes, BoxesAreExactRasterExtents) {
  ShapesOptions o;
  o.num_images = 20;
  Dataset ds = generate_shapes_dataset(o);
  for (const auto& s : ds.samples) {
    for (int64_t k = 0; k < s.boxes.size(); ++k) {
      auto b = s.boxes.box(k);
      // Foreground colors are >= 140/255 in every channel, backgrounds <= 60/255.
      int64_t x1 = s.width(), y1 = s.height(), x2 = -1, y2 = -1;
      for (int64_t y = static_cast<int64_t>(b[1]) - 1; y <= static_cast<int64_t>(b[3]); ++y)
        for (int64_t x = static_cast<int64_t>(b[0]) - 1; x <= static_cast<int64_t>(b[2]); ++x) {
          if (x < 0 || y < 0 || x >= s.width() || y >= s.height()) continue;
          if (s.image[(y * s.width() + x) * 3] > 100.0 / 255) {
            x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
          }
        }
      EXPECT_EQ(b, (std::array<double, 4>{double(x1), double(y1), double(x2 + 1), double(y2 + 1)}));
    }
  }
}

TEST(Shapes, JsonRoundTripIsIdentity) {
  ShapesOptions o;
  o.num_images = 5;
  Dataset ds = generate_shapes_dataset(o);
  auto d = scratch("roundtrip");
  auto json = write_coco_dataset(ds, d);
  Dataset back = load_coco_annotations(json, d / "images");
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.class_names, ds.class_names);
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_TRUE(same_annotations(ds.samples[i], back.samples[i]));
    EXPECT_EQ(ds.samples[i].image, back.samples[i].image);
  }
}

TEST(Resize, CappedByLongSide) {
  Sample s = blank(500, 1400, {{100, 50, 300, 250}}, {0});
  Sample r = resize_shortest_edge(s, 800, 1333);
  EXPECT_EQ(r.height(), 476);
  EXPECT_EQ(r.width(), 1333);
  // Boxes follow the realized per-axis scale, not the nominal one.
  auto b = r.boxes.box(0);
  EXPECT_NEAR(b[0], 100 * 1333.0 / 1400.0, 1e-9);
  EXPECT_NEAR(b[3], 250 * 476.0 / 500.0, 1e-9);
  Sample sq = resize_shortest_edge(blank(100, 100, {}, {}), 800, 1333);
  EXPECT_EQ(sq.height(), 800);
  EXPECT_EQ(sq.width(), 800);
}

TEST(Resize, BoxesFollowTheImageScale) {
  Sample s = blank(40, 60, {{10, 10, 30, 20}}, {1});
  Sample r = resize_shortest_edge(s, 80, 1000);
  ASSERT_EQ(r.width(), 120);
  auto iou = geometry::box_iou(r.boxes.data(), Tensor::from({1, 4}, {20, 20, 60, 40}));
  EXPECT_NEAR(iou.at(0, 0), 1.0, 1e-12);
}

TEST(Crop, DropsExcludedBoxesAndRealignsLabels) {
  Sample s = blank(100, 100, {{5, 5, 20, 20}, {60, 60, 90, 90}, {40, 10, 70, 30}}, {0, 1, 2});
  Sample c = crop(s, 50, 0, 50, 100);
  ASSERT_EQ(c.boxes.size(), 2);
  EXPECT_EQ(c.labels, (std::vector<int64_t>{1, 2}));
  EXPECT_EQ(c.boxes.box(0), (std::array<double, 4>{10, 60, 40, 90}));
  EXPECT_EQ(c.boxes.box(1), (std::array<double, 4>{0, 10, 20, 30}));
  Sample all = crop(s, 0, 0, 95, 95);
  EXPECT_EQ(all.boxes.size(), 3);
  EXPECT_EQ(all.boxes.box(0), s.boxes.box(0));
}

TEST(Crop, ZeroProbabilityIsPlainResize) {
  Sample s = blank(60, 80, {{10, 10, 30, 40}}, {0});
  std::mt19937_64 a(3), b(3);
  Sample x = random_crop_then_resize(s, 0.0, 0.3, {64, 96}, 160, a);
  Sample y = resize_shortest_edge(s, std::vector<int64_t>{64, 96}, 160, b);
  EXPECT_EQ(x.image, y.image);
  EXPECT_TRUE(same_annotations(x, y));
}

TEST(Augment, FuzzKeepsBoxesValid) {
  auto ds = toy::shapes(50, 48, 9);
  AugmentOptions o;
  o.short_sizes = {32, 48, 64};
  o.max_size = 80;
  o.crop_prob = 0.7;
  for (int t = 0; t < 1000; ++t) {
    const Sample& s = ds->samples[static_cast<size_t>(t % 50)];
    auto rng = sample_rng(42, s.image_id, t);
    Sample out = apply_augment(s, o, rng);
    expect_valid(out);
  }
}

TEST(Augment, DeterministicGivenStream) {
  auto ds = toy::shapes(3);
  AugmentOptions o;
  o.short_sizes = {48, 64};
  o.max_size = 96;
  auto r1 = sample_rng(5, 2, 1), r2 = sample_rng(5, 2, 1);
  Sample a = apply_augment(ds->samples[1], o, r1), b = apply_augment(ds->samples[1], o, r2);
  EXPECT_EQ(a.image, b.image);
  EXPECT_TRUE(same_annotations(a, b));
}

TEST(Collate, PaddingMasksAndNormalization) {
  Sample a = blank(100, 100, {{0, 0, 100, 100}}, {0});
  Sample b = blank(120, 90, {{0, 0, 45, 60}}, {1});
  Batch batch = collate_batch({a, b}, 32);
  EXPECT_EQ(batch.images.shape(), (Shape{2, 3, 128, 128}));
  EXPECT_EQ(batch.masks[0][0], 0);
  EXPECT_EQ(batch.masks[0][100], 1);        // column 100 of row 0
  EXPECT_EQ(batch.masks[1][127 * 128], 1);  // row 127
  EXPECT_EQ(batch.masks[1][119 * 128 + 89], 0);
  const Tensor& t0 = batch.targets[0].boxes;
  EXPECT_EQ((std::array<double, 4>{t0.at(0, 0), t0.at(0, 1), t0.at(0, 2), t0.at(0, 3)}),
            (std::array<double, 4>{0.5, 0.5, 1, 1}));
  const Tensor& t1 = batch.targets[1].boxes;
  EXPECT_NEAR(t1.at(0, 2), 0.5, 1e-15);
  EXPECT_NEAR(t1.at(0, 3), 0.5, 1e-15);

  Batch one = collate_batch({a}, 1);
  EXPECT_EQ(one.images.shape(), (Shape{1, 3, 100, 100}));
  for (auto m : one.masks[0]) EXPECT_EQ(m, 0);
}

TEST(Loader, BatchDependsOnlyOnIteration) {
  auto ds = toy::shapes(5);
  DataLoader l(ds, 2, toy::fixed_size(64), 7);
  Batch a = l.batch_at(11), b = l.batch_at(11);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.image_ids, b.image_ids);
  // Each epoch visits every image once.
  std::multiset<int64_t> seen;
  for (int it = 0; it < 5; ++it)
    for (auto id : l.batch_at(it).image_ids) seen.insert(id);
  for (int64_t id = 1; id <= 5; ++id) EXPECT_EQ(seen.count(id), 2u);
}
