#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "detkit/geometry.hpp"
#include "detkit/model/types.hpp"

namespace detkit::data {

DETKIT_DEFINE_ERROR(SchemaError);
DETKIT_DEFINE_ERROR(MissingImage);
DETKIT_DEFINE_ERROR(WriteError);

struct Sample {
  Tensor image;  // [H x W x 3], values in [0,1]
  geometry::BoxArray boxes;  // xyxy_abs
  std::vector<int64_t> labels;
  std::vector<uint8_t> crowd;
  int64_t image_id = 0;
  std::string file_name;
  int64_t height() const { return image.dim(0); }
  int64_t width() const { return image.dim(1); }
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;    // contiguous index -> name
  std::vector<int64_t> category_ids;       // contiguous index -> original COCO id
  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
};

// COCO detection JSON. bbox xywh -> xyxy; categories remapped to contiguous
// indices in sorted-id order. With load_images=false, images are [H x W x 0]
// placeholders carrying only the declared size.
Dataset load_coco_annotations(const std::filesystem::path& json_path, const std::filesystem::path& image_root,
                              bool load_images = true);

struct ShapesOptions {
  uint64_t seed = 0;
  int num_images = 16;
  int image_size = 64;
  int max_objects = 3;
  double min_extent = 0.2;  // object side as a fraction of the image side
  double max_extent = 0.45;
};

// Circles, squares and triangles on a flat background. Boxes are the exact
// extent of the rasterized pixels; colors are multiples of 1/255 so a PNG
// round trip is lossless.
Dataset generate_shapes_dataset(const ShapesOptions& opts);

// Writes <dir>/images/*.png and <dir>/annotations.json; returns the JSON path.
std::filesystem::path write_coco_dataset(const Dataset& ds, const std::filesystem::path& dir);
std::string to_coco_json(const Dataset& ds);

bool same_annotations(const Sample& a, const Sample& b);

Sample resize_shortest_edge(const Sample& s, int64_t short_side, int64_t max_size);
// Short side drawn uniformly from `short_sizes`.
Sample resize_shortest_edge(const Sample& s, const std::vector<int64_t>& short_sizes, int64_t max_size,
                            std::mt19937_64& rng);
// Random rectangle with each side at least `min_fraction` of the image.
// Boxes are clipped; boxes left with zero area are dropped.
Sample random_crop(const Sample& s, double min_fraction, std::mt19937_64& rng);
Sample crop(const Sample& s, int64_t x0, int64_t y0, int64_t w, int64_t h);
Sample random_crop_then_resize(const Sample& s, double crop_prob, double min_fraction,
                               const std::vector<int64_t>& short_sizes, int64_t max_size, std::mt19937_64& rng);

struct Batch {
  Tensor images;                       // [B x 3 x H x W]
  std::vector<model::Mask> masks;      // [H x W] each, nonzero = padding
  std::vector<model::Targets> targets;  // cxcywh normalized by the true extent
  std::vector<geometry::ImageSize> sizes;
  std::vector<int64_t> image_ids;
  int64_t size() const { return static_cast<int64_t>(masks.size()); }
};

Batch collate_batch(const std::vector<Sample>& samples, int64_t size_divisibility = 32);

// Independent stream for one sample so results do not depend on ordering.
std::mt19937_64 sample_rng(uint64_t seed, int64_t image_id, int64_t epoch = 0);

struct AugmentOptions {
  bool train = true;
  std::vector<int64_t> short_sizes = {480, 512, 544, 576, 608, 640, 672, 704, 736, 768, 800};
  int64_t max_size = 1333;
  double crop_prob = 0.5;
  double min_crop_fraction = 0.3;
  int64_t test_short_size = 800;
};

Sample apply_augment(const Sample& s, const AugmentOptions& opts, std::mt19937_64& rng);

// Deterministic sampler: the batch for iteration i depends only on (seed, i),
// so resuming at any iteration reproduces the uninterrupted stream.
class DataLoader {
 public:
  DataLoader(std::shared_ptr<const Dataset> dataset, int64_t batch_size, AugmentOptions augment, uint64_t seed,
             bool shuffle = true, int64_t size_divisibility = 32);
  Batch batch_at(int64_t iteration) const;
  int64_t batches_per_epoch() const;
  const Dataset& dataset() const { return *dataset_; }
  int64_t batch_size() const { return batch_size_; }

 private:
  std::shared_ptr<const Dataset> dataset_;
  int64_t batch_size_;
  AugmentOptions augment_;
  uint64_t seed_;
  bool shuffle_;
  int64_t divisibility_;
};

}  // namespace detkit::data
