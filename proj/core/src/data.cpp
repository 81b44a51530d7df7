#include "detkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace detkit::data {

using json = nlohmann::json;
using geometry::BoxArray;
using geometry::BoxFormat;

namespace {

Tensor from_mat(const cv::Mat& bgr) {
  const int64_t h = bgr.rows, w = bgr.cols;
  Tensor t({h, w, 3});
  for (int64_t y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t[(y * w + x) * 3 + c] = row[x][2 - c] / 255.0;
  }
  return t;
}

cv::Mat to_mat(const Tensor& img) {
  const int h = static_cast<int>(img.dim(0)), w = static_cast<int>(img.dim(1));
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[x][2 - c] = cv::saturate_cast<uchar>(std::lround(img[(static_cast<int64_t>(y) * w + x) * 3 + c] * 255.0));
  }
  return m;
}

template <typename T>
T require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw SchemaError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

Dataset load_coco_annotations(const std::filesystem::path& json_path, const std::filesystem::path& image_root,
                              bool load_images) {
  std::ifstream f(json_path);
  if (!f) throw SchemaError("cannot open " + json_path.string());
  json root;
  try {
    root = json::parse(f);
  } catch (const json::exception& e) {
    throw SchemaError(json_path.string() + ": " + e.what());
  }
  for (const char* key : {"images", "annotations", "categories"})
    if (!root.contains(key) || !root[key].is_array()) throw SchemaError(std::string("missing array '") + key + "'");

  Dataset ds;
  std::map<int64_t, std::string> cats;
  for (const auto& c : root["categories"]) {
    const auto id = require<int64_t>(c, "id", "category");
    if (!cats.emplace(id, require<std::string>(c, "name", "category")).second)
      throw SchemaError("duplicate category id " + std::to_string(id));
  }
  std::map<int64_t, int64_t> cat_index;
  for (const auto& [id, name] : cats) {
    cat_index[id] = static_cast<int64_t>(ds.class_names.size());
    ds.class_names.push_back(name);
    ds.category_ids.push_back(id);
  }

  std::map<int64_t, size_t> image_index;
  for (const auto& im : root["images"]) {
    Sample s;
    s.image_id = require<int64_t>(im, "id", "image");
    s.file_name = require<std::string>(im, "file_name", "image");
    const auto h = require<int64_t>(im, "height", "image");
    const auto w = require<int64_t>(im, "width", "image");
    if (!image_index.emplace(s.image_id, ds.samples.size()).second)
      throw SchemaError("duplicate image id " + std::to_string(s.image_id));
    if (load_images) {
      const auto path = image_root / s.file_name;
      cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
      if (m.empty()) throw MissingImage("cannot read image " + path.string());
      if (m.rows != h || m.cols != w)
        throw SchemaError("image " + s.file_name + " is " + std::to_string(m.cols) + "x" + std::to_string(m.rows) +
                          ", annotation says " + std::to_string(w) + "x" + std::to_string(h));
      s.image = from_mat(m);
    } else {
      s.image = Tensor(Shape{h, w, 0});
    }
    ds.samples.push_back(std::move(s));
  }

  std::vector<std::vector<std::array<double, 4>>> boxes(ds.samples.size());
  for (const auto& a : root["annotations"]) {
    const auto img = require<int64_t>(a, "image_id", "annotation");
    auto it = image_index.find(img);
    if (it == image_index.end()) throw SchemaError("annotation references unknown image id " + std::to_string(img));
    const auto cat = require<int64_t>(a, "category_id", "annotation");
    auto ct = cat_index.find(cat);
    if (ct == cat_index.end()) throw SchemaError("annotation references unknown category id " + std::to_string(cat));
    const auto bbox = require<std::vector<double>>(a, "bbox", "annotation");
    if (bbox.size() != 4 || bbox[2] < 0 || bbox[3] < 0) throw SchemaError("annotation bbox must be [x, y, w, h]");
    auto& s = ds.samples[it->second];
    boxes[it->second].push_back({bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]});
    s.labels.push_back(ct->second);
    s.crowd.push_back(a.contains("iscrowd") && a["iscrowd"].get<int>() != 0 ? 1 : 0);
  }
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    auto& s = ds.samples[i];
    s.boxes = BoxArray::xyxy(std::move(boxes[i]),
                             geometry::ImageSize{static_cast<double>(s.height()), static_cast<double>(s.width())});
  }
  return ds;
}

namespace {

const char* kShapeNames[] = {"circle", "square", "triangle"};

// Rasterizes one shape; returns its pixel mask and exact extent.
struct Raster {
  std::vector<uint8_t> mask;
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // half-open extent
  bool empty = true;
};

Raster rasterize(int cls, double cx, double cy, double side, int size) {
  Raster r;
  r.mask.assign(static_cast<size_t>(size * size), 0);
  const double half = side / 2;
  // Triangle: apex up, base at the bottom of the bounding square.
  const double ax = cx, ay = cy - half, bx = cx - half, by = cy + half, qx = cx + half, qy = cy + half;
  auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
    return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
  };
  int minx = size, miny = size, maxx = -1, maxy = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool in = false;
      switch (cls) {
        case 0: in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half; break;
        case 1: in = std::abs(px - cx) <= half && std::abs(py - cy) <= half; break;
        default: {
          const double e0 = edge(ax, ay, bx, by, px, py), e1 = edge(bx, by, qx, qy, px, py),
                       e2 = edge(qx, qy, ax, ay, px, py);
          in = (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
        }
      }
      if (in) {
        r.mask[static_cast<size_t>(y * size + x)] = 1;
        minx = std::min(minx, x);
        miny = std::min(miny, y);
        maxx = std::max(maxx, x);
        maxy = std::max(maxy, y);
      }
    }
  if (maxx >= 0) {
    r.empty = false;
    r.x1 = minx;
    r.y1 = miny;
    r.x2 = maxx + 1;
    r.y2 = maxy + 1;
  }
  return r;
}

}  // namespace

Dataset generate_shapes_dataset(const ShapesOptions& opts) {
  if (opts.num_images < 1) throw SchemaError("generate_shapes_dataset: num_images must be >= 1");
  if (opts.max_objects < 1 || opts.image_size < 8) throw SchemaError("generate_shapes_dataset: bad options");
  Dataset ds;
  for (int c = 0; c < 3; ++c) {
    ds.class_names.emplace_back(kShapeNames[c]);
    ds.category_ids.push_back(c + 1);
  }
  const int size = opts.image_size;
  for (int i = 0; i < opts.num_images; ++i) {
    std::mt19937_64 rng = sample_rng(opts.seed, i, 0);
    std::uniform_int_distribution<int> byte(0, 60);
    std::uniform_int_distribution<int> bright(140, 255);
    std::uniform_int_distribution<int> count(1, opts.max_objects);
    std::uniform_int_distribution<int> cls_dist(0, 2);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    Sample s;
    s.image_id = i + 1;
    s.file_name = "shape_" + std::to_string(i + 1) + ".png";
    s.image = Tensor({size, size, 3});
    const int bg[3] = {byte(rng), byte(rng), byte(rng)};
    for (int64_t p = 0; p < static_cast<int64_t>(size) * size; ++p)
      for (int c = 0; c < 3; ++c) s.image[p * 3 + c] = bg[c] / 255.0;

    std::vector<std::array<double, 4>> boxes;
    const int n = count(rng);
    for (int k = 0; k < n; ++k) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        const int cls = cls_dist(rng);
        const double side = size * (opts.min_extent + (opts.max_extent - opts.min_extent) * u01(rng));
        const double cx = side / 2 + 1 + (size - side - 2) * u01(rng);
        const double cy = side / 2 + 1 + (size - side - 2) * u01(rng);
        Raster r = rasterize(cls, cx, cy, side, size);
        if (r.empty || r.x2 - r.x1 < 2 || r.y2 - r.y1 < 2) continue;
        // Keep objects disjoint (with a 1px gap) so extents stay exact.
        bool overlap = false;
        for (const auto& b : boxes)
          overlap = overlap || !(r.x2 + 1 <= b[0] || b[2] + 1 <= r.x1 || r.y2 + 1 <= b[1] || b[3] + 1 <= r.y1);
        if (overlap) continue;
        const int color[3] = {bright(rng), bright(rng), bright(rng)};
        for (int64_t p = 0; p < static_cast<int64_t>(size) * size; ++p)
          if (r.mask[static_cast<size_t>(p)])
            for (int c = 0; c < 3; ++c) s.image[p * 3 + c] = color[c] / 255.0;
        boxes.push_back({static_cast<double>(r.x1), static_cast<double>(r.y1), static_cast<double>(r.x2),
                         static_cast<double>(r.y2)});
        s.labels.push_back(cls);
        s.crowd.push_back(0);
        break;
      }
    }
    s.boxes = BoxArray::xyxy(std::move(boxes), geometry::ImageSize{static_cast<double>(size), static_cast<double>(size)});
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::string to_coco_json(const Dataset& ds) {
  json root;
  root["images"] = json::array();
  root["annotations"] = json::array();
  root["categories"] = json::array();
  int64_t ann_id = 1;
  for (const auto& s : ds.samples) {
    root["images"].push_back({{"id", s.image_id}, {"file_name", s.file_name}, {"height", s.height()}, {"width", s.width()}});
    for (int64_t k = 0; k < s.boxes.size(); ++k) {
      const auto b = s.boxes.box(k);
      const double w = b[2] - b[0], h = b[3] - b[1];
      root["annotations"].push_back({{"id", ann_id++},
                                     {"image_id", s.image_id},
                                     {"category_id", ds.category_ids[static_cast<size_t>(s.labels[static_cast<size_t>(k)])]},
                                     {"bbox", {b[0], b[1], w, h}},
                                     {"area", w * h},
                                     {"iscrowd", s.crowd.empty() ? 0 : s.crowd[static_cast<size_t>(k)]}});
    }
  }
  for (size_t c = 0; c < ds.class_names.size(); ++c)
    root["categories"].push_back({{"id", ds.category_ids[c]}, {"name", ds.class_names[c]}});
  return root.dump(1);
}

std::filesystem::path write_coco_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw WriteError("cannot create " + (dir / "images").string() + ": " + ec.message());
  for (const auto& s : ds.samples)
    if (!cv::imwrite((dir / "images" / s.file_name).string(), to_mat(s.image)))
      throw WriteError("cannot write " + s.file_name);
  const auto path = dir / "annotations.json";
  std::ofstream f(path);
  if (!f) throw WriteError("cannot write " + path.string());
  f << to_coco_json(ds);
  return path;
}

bool same_annotations(const Sample& a, const Sample& b) {
  return a.image_id == b.image_id && a.labels == b.labels && a.crowd == b.crowd &&
         a.boxes.data() == b.boxes.data();
}

namespace {

Sample with_boxes(const Sample& s, Tensor image, std::vector<std::array<double, 4>> boxes,
                  std::vector<int64_t> labels, std::vector<uint8_t> crowd) {
  Sample out;
  out.image = std::move(image);
  out.image_id = s.image_id;
  out.file_name = s.file_name;
  out.labels = std::move(labels);
  out.crowd = std::move(crowd);
  out.boxes = BoxArray::xyxy(std::move(boxes), geometry::ImageSize{static_cast<double>(out.image.dim(0)),
                                                                   static_cast<double>(out.image.dim(1))});
  return out;
}

}  // namespace

Sample resize_shortest_edge(const Sample& s, int64_t short_side, int64_t max_size) {
  const double h = static_cast<double>(s.height()), w = static_cast<double>(s.width());
  double factor = static_cast<double>(short_side) / std::min(h, w);
  if (std::max(h, w) * factor > static_cast<double>(max_size)) factor = static_cast<double>(max_size) / std::max(h, w);
  const auto nh = static_cast<int64_t>(std::lround(h * factor));
  const auto nw = static_cast<int64_t>(std::lround(w * factor));
  Tensor image;
  if (nh == s.height() && nw == s.width()) {
    image = s.image;
  } else if (s.image.dim(2) == 0) {
    image = Tensor(Shape{nh, nw, 0});
  } else {
    cv::Mat src(static_cast<int>(s.height()), static_cast<int>(s.width()), CV_64FC3,
                const_cast<double*>(s.image.data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(static_cast<int>(nw), static_cast<int>(nh)), 0, 0, cv::INTER_LINEAR);
    image = Tensor({nh, nw, 3}, std::vector<double>(dst.ptr<double>(), dst.ptr<double>() + nh * nw * 3));
  }
  const double sx = static_cast<double>(nw) / w, sy = static_cast<double>(nh) / h;
  std::vector<std::array<double, 4>> boxes;
  for (int64_t k = 0; k < s.boxes.size(); ++k) {
    const auto b = s.boxes.box(k);
    boxes.push_back({b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy});
  }
  return with_boxes(s, std::move(image), std::move(boxes), s.labels, s.crowd);
}

Sample resize_shortest_edge(const Sample& s, const std::vector<int64_t>& short_sizes, int64_t max_size,
                            std::mt19937_64& rng) {
  if (short_sizes.empty()) throw SchemaError("resize_shortest_edge: no short sizes configured");
  std::uniform_int_distribution<size_t> pick(0, short_sizes.size() - 1);
  return resize_shortest_edge(s, short_sizes[pick(rng)], max_size);
}

Sample crop(const Sample& s, int64_t x0, int64_t y0, int64_t cw, int64_t ch) {
  const int64_t W = s.width();
  const int64_t C = s.image.dim(2);
  Tensor image({ch, cw, C});
  for (int64_t y = 0; y < ch; ++y)
    std::copy_n(s.image.data() + ((y0 + y) * W + x0) * C, cw * C, image.data() + y * cw * C);
  std::vector<std::array<double, 4>> boxes;
  std::vector<int64_t> labels;
  std::vector<uint8_t> crowd;
  for (int64_t k = 0; k < s.boxes.size(); ++k) {
    const auto b = s.boxes.box(k);
    const double x1 = std::clamp(b[0] - x0, 0.0, static_cast<double>(cw));
    const double y1 = std::clamp(b[1] - y0, 0.0, static_cast<double>(ch));
    const double x2 = std::clamp(b[2] - x0, 0.0, static_cast<double>(cw));
    const double y2 = std::clamp(b[3] - y0, 0.0, static_cast<double>(ch));
    if (x2 <= x1 || y2 <= y1) continue;
    boxes.push_back({x1, y1, x2, y2});
    labels.push_back(s.labels[static_cast<size_t>(k)]);
    crowd.push_back(s.crowd.empty() ? 0 : s.crowd[static_cast<size_t>(k)]);
  }
  return with_boxes(s, std::move(image), std::move(boxes), std::move(labels), std::move(crowd));
}

Sample random_crop(const Sample& s, double min_fraction, std::mt19937_64& rng) {
  const int64_t W = s.width(), H = s.height();
  const auto min_w = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(min_fraction * static_cast<double>(W))));
  const auto min_h = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(min_fraction * static_cast<double>(H))));
  const int64_t cw = std::uniform_int_distribution<int64_t>(std::min(min_w, W), W)(rng);
  const int64_t ch = std::uniform_int_distribution<int64_t>(std::min(min_h, H), H)(rng);
  const int64_t x0 = std::uniform_int_distribution<int64_t>(0, W - cw)(rng);
  const int64_t y0 = std::uniform_int_distribution<int64_t>(0, H - ch)(rng);
  return crop(s, x0, y0, cw, ch);
}

Sample random_crop_then_resize(const Sample& s, double crop_prob, double min_fraction,
                               const std::vector<int64_t>& short_sizes, int64_t max_size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (crop_prob > 0 && u01(rng) < crop_prob) return resize_shortest_edge(random_crop(s, min_fraction, rng), short_sizes, max_size, rng);
  return resize_shortest_edge(s, short_sizes, max_size, rng);
}

Sample apply_augment(const Sample& s, const AugmentOptions& opts, std::mt19937_64& rng) {
  if (!opts.train) return resize_shortest_edge(s, opts.test_short_size, opts.max_size);
  return random_crop_then_resize(s, opts.crop_prob, opts.min_crop_fraction, opts.short_sizes, opts.max_size, rng);
}

Batch collate_batch(const std::vector<Sample>& samples, int64_t size_divisibility) {
  if (samples.empty()) throw SchemaError("collate_batch: empty batch");
  if (size_divisibility < 1) size_divisibility = 1;
  int64_t H = 0, W = 0;
  for (const auto& s : samples) {
    H = std::max(H, s.height());
    W = std::max(W, s.width());
  }
  H = (H + size_divisibility - 1) / size_divisibility * size_divisibility;
  W = (W + size_divisibility - 1) / size_divisibility * size_divisibility;
  Batch b;
  const auto B = static_cast<int64_t>(samples.size());
  b.images = Tensor({B, 3, H, W});
  for (int64_t i = 0; i < B; ++i) {
    const auto& s = samples[static_cast<size_t>(i)];
    const int64_t h = s.height(), w = s.width();
    if (s.image.dim(2) == 3)
      for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            b.images[((i * 3 + c) * H + y) * W + x] = s.image[(y * w + x) * 3 + c];
    model::Mask m(static_cast<size_t>(H * W), 1);
    for (int64_t y = 0; y < h; ++y) std::fill_n(m.begin() + y * W, w, 0);
    b.masks.push_back(std::move(m));
    model::Targets t;
    t.labels = s.labels;
    t.crowd = s.crowd;
    t.boxes = Tensor({s.boxes.size(), 4});
    for (int64_t k = 0; k < s.boxes.size(); ++k) {
      const auto bx = s.boxes.box(k);
      const double x1 = std::clamp(bx[0] / w, 0.0, 1.0), x2 = std::clamp(bx[2] / w, 0.0, 1.0);
      const double y1 = std::clamp(bx[1] / h, 0.0, 1.0), y2 = std::clamp(bx[3] / h, 0.0, 1.0);
      t.boxes.at(k, 0) = (x1 + x2) / 2;
      t.boxes.at(k, 1) = (y1 + y2) / 2;
      t.boxes.at(k, 2) = x2 - x1;
      t.boxes.at(k, 3) = y2 - y1;
    }
    b.targets.push_back(std::move(t));
    b.sizes.push_back({static_cast<double>(h), static_cast<double>(w)});
    b.image_ids.push_back(s.image_id);
  }
  return b;
}

std::mt19937_64 sample_rng(uint64_t seed, int64_t image_id, int64_t epoch) {
  const auto id = static_cast<uint64_t>(image_id);
  const auto ep = static_cast<uint64_t>(epoch);
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(id),
                    static_cast<uint32_t>(id >> 32), static_cast<uint32_t>(ep), static_cast<uint32_t>(ep >> 32)};
  return std::mt19937_64(seq);
}

DataLoader::DataLoader(std::shared_ptr<const Dataset> dataset, int64_t batch_size, AugmentOptions augment,
                       uint64_t seed, bool shuffle, int64_t size_divisibility)
    : dataset_(std::move(dataset)),
      batch_size_(batch_size),
      augment_(std::move(augment)),
      seed_(seed),
      shuffle_(shuffle),
      divisibility_(size_divisibility) {
  if (!dataset_ || dataset_->samples.empty()) throw SchemaError("DataLoader: empty dataset");
  if (batch_size < 1) throw SchemaError("DataLoader: batch_size must be >= 1");
}

int64_t DataLoader::batches_per_epoch() const {
  const auto n = static_cast<int64_t>(dataset_->samples.size());
  return (n + batch_size_ - 1) / batch_size_;
}

Batch DataLoader::batch_at(int64_t iteration) const {
  const auto n = static_cast<int64_t>(dataset_->samples.size());
  std::vector<Sample> picked;
  int64_t cached_epoch = -1;
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t j = 0; j < batch_size_; ++j) {
    const int64_t k = iteration * batch_size_ + j;
    const int64_t epoch = k / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      if (shuffle_) {
        auto rng = sample_rng(seed_, -1, epoch);
        std::shuffle(perm.begin(), perm.end(), rng);
      }
      cached_epoch = epoch;
    }
    const auto& s = dataset_->samples[static_cast<size_t>(perm[static_cast<size_t>(k % n)])];
    auto rng = sample_rng(seed_, s.image_id, k);
    picked.push_back(apply_augment(s, augment_, rng));
  }
  return collate_batch(picked, divisibility_);
}

}  // namespace detkit::data
