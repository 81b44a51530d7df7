#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "detkit/errors.hpp"
#include "detkit/tensor.hpp"

namespace detkit::geometry {

DETKIT_DEFINE_ERROR(MissingImageSize);
DETKIT_DEFINE_ERROR(InvalidBoxes);
DETKIT_DEFINE_ERROR(NonFiniteCost);
DETKIT_DEFINE_ERROR(BadThreshold);

enum class BoxFormat { kCxcywhNorm, kXyxyAbs };

const char* format_name(BoxFormat f);

struct ImageSize {
  double height = 0;
  double width = 0;
  bool operator==(const ImageSize&) const = default;
};

// N boxes in one coordinate convention.
//   kCxcywhNorm: (cx, cy, w, h) relative to the image, all in [0,1].
//   kXyxyAbs:    (x1, y1, x2, y2) in pixels, x2 >= x1, y2 >= y1.
class BoxArray {
 public:
  BoxArray() : data_(Shape{0, 4}) {}
  BoxArray(Tensor data, BoxFormat format, std::optional<ImageSize> image_size = std::nullopt);

  static BoxArray xyxy(std::vector<std::array<double, 4>> boxes, std::optional<ImageSize> size = std::nullopt);
  static BoxArray cxcywh(std::vector<std::array<double, 4>> boxes, std::optional<ImageSize> size = std::nullopt);

  const Tensor& data() const { return data_; }
  BoxFormat format() const { return format_; }
  const std::optional<ImageSize>& image_size() const { return image_size_; }
  int64_t size() const { return data_.dim(0); }
  std::array<double, 4> box(int64_t i) const;

  // Throws InvalidBoxes when the format invariants do not hold (tolerance 1e-9).
  void validate() const;

 private:
  Tensor data_;
  BoxFormat format_ = BoxFormat::kXyxyAbs;
  std::optional<ImageSize> image_size_;
};

BoxArray convert_format(const BoxArray& boxes, BoxFormat to);

// "xyxy" or "cxcywh". Throws InvalidBoxes otherwise.
BoxFormat parse_box_format(const std::string& name);

// Conversion to a fixed format; the form a config names.
class BoxConverter {
 public:
  explicit BoxConverter(BoxFormat to) : to_(to) {}
  BoxFormat format() const { return to_; }
  BoxArray operator()(const BoxArray& boxes) const { return convert_format(boxes, to_); }

 private:
  BoxFormat to_;
};

// Raw box helpers on [N x 4] tensors.
Tensor cxcywh_to_xyxy(const Tensor& boxes);
Tensor xyxy_to_cxcywh(const Tensor& boxes);

// [M x N] IoU; zero-area boxes have IoU 0 against everything.
Tensor box_iou(const BoxArray& a, const BoxArray& b);
Tensor box_iou(const Tensor& a_xyxy, const Tensor& b_xyxy);
// [M x N] GIoU in [-1, 1].
Tensor generalized_iou(const BoxArray& a, const BoxArray& b);
Tensor generalized_iou(const Tensor& a_xyxy, const Tensor& b_xyxy);

struct Assignment {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (prediction, target), sorted by prediction
  double total_cost = 0.0;
};

// Minimum-cost one-to-one assignment of size min(M, N) via shortest
// augmenting paths with potentials (O(n^2 m)).
Assignment hungarian_match(const Tensor& cost);

struct MatchWeights {
  double class_weight = 1.0;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
  double alpha = 0.25;
  double gamma = 2.0;
};

// Focal-style classification cost for predicted probability p of the target class.
double focal_class_cost(double p, double alpha, double gamma);

// [M x T] matching cost. class_prob is [M x C] sigmoid probabilities; both
// box sets are cxcywh_norm.
Tensor build_match_cost(const Tensor& class_prob, const BoxArray& pred_boxes, const std::vector<int64_t>& tgt_labels,
                        const BoxArray& tgt_boxes, const MatchWeights& weights);

// Greedy NMS. Returns kept indices in descending score order; equal scores
// keep the lower index first. Boxes with IoU > threshold against a kept box
// are suppressed.
std::vector<int64_t> nms(const BoxArray& boxes, const std::vector<double>& scores, double iou_threshold);
// Per-class variant: only boxes sharing a label suppress each other.
std::vector<int64_t> batched_nms(const BoxArray& boxes, const std::vector<double>& scores,
                                 const std::vector<int64_t>& labels, double iou_threshold);

}  // namespace detkit::geometry
