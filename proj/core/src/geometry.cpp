#include "detkit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace detkit::geometry {

const char* format_name(BoxFormat f) { return f == BoxFormat::kCxcywhNorm ? "cxcywh_norm" : "xyxy_abs"; }

BoxFormat parse_box_format(const std::string& name) {
  if (name == "xyxy" || name == "xyxy_abs") return BoxFormat::kXyxyAbs;
  if (name == "cxcywh" || name == "cxcywh_norm") return BoxFormat::kCxcywhNorm;
  throw InvalidBoxes("unknown box format '" + name + "' (expected xyxy or cxcywh)");
}

BoxArray::BoxArray(Tensor data, BoxFormat format, std::optional<ImageSize> image_size)
    : data_(std::move(data)), format_(format), image_size_(image_size) {
  if (data_.numel() == 0) data_ = Tensor(Shape{0, 4});
  if (data_.rank() != 2 || data_.dim(1) != 4) throw ShapeMismatch("BoxArray needs [N x 4], got " + shape_str(data_.shape()));
}

namespace {
Tensor pack(const std::vector<std::array<double, 4>>& boxes) {
  Tensor t({static_cast<int64_t>(boxes.size()), 4});
  for (size_t i = 0; i < boxes.size(); ++i)
    for (int k = 0; k < 4; ++k) t[static_cast<int64_t>(i) * 4 + k] = boxes[i][k];
  return t;
}
}  // namespace

BoxArray BoxArray::xyxy(std::vector<std::array<double, 4>> boxes, std::optional<ImageSize> size) {
  return BoxArray(pack(boxes), BoxFormat::kXyxyAbs, size);
}

BoxArray BoxArray::cxcywh(std::vector<std::array<double, 4>> boxes, std::optional<ImageSize> size) {
  return BoxArray(pack(boxes), BoxFormat::kCxcywhNorm, size);
}

std::array<double, 4> BoxArray::box(int64_t i) const {
  return {data_[i * 4], data_[i * 4 + 1], data_[i * 4 + 2], data_[i * 4 + 3]};
}

void BoxArray::validate() const {
  constexpr double tol = 1e-9;
  for (int64_t i = 0; i < size(); ++i) {
    const auto b = box(i);
    for (double v : b)
      if (!std::isfinite(v)) throw InvalidBoxes("non-finite coordinate in box " + std::to_string(i));
    if (format_ == BoxFormat::kCxcywhNorm) {
      for (double v : b)
        if (v < -tol || v > 1.0 + tol) throw InvalidBoxes("normalized box " + std::to_string(i) + " outside [0,1]");
    } else if (b[2] < b[0] - tol || b[3] < b[1] - tol) {
      throw InvalidBoxes("xyxy box " + std::to_string(i) + " has x2 < x1 or y2 < y1");
    }
  }
}

Tensor cxcywh_to_xyxy(const Tensor& boxes) {
  Tensor out(boxes.shape());
  for (int64_t i = 0; i < boxes.numel() / 4; ++i) {
    const double* b = boxes.data() + i * 4;
    out[i * 4 + 0] = b[0] - 0.5 * b[2];
    out[i * 4 + 1] = b[1] - 0.5 * b[3];
    out[i * 4 + 2] = b[0] + 0.5 * b[2];
    out[i * 4 + 3] = b[1] + 0.5 * b[3];
  }
  return out;
}

Tensor xyxy_to_cxcywh(const Tensor& boxes) {
  Tensor out(boxes.shape());
  for (int64_t i = 0; i < boxes.numel() / 4; ++i) {
    const double* b = boxes.data() + i * 4;
    out[i * 4 + 0] = 0.5 * (b[0] + b[2]);
    out[i * 4 + 1] = 0.5 * (b[1] + b[3]);
    out[i * 4 + 2] = b[2] - b[0];
    out[i * 4 + 3] = b[3] - b[1];
  }
  return out;
}

BoxArray convert_format(const BoxArray& boxes, BoxFormat to) {
  if (boxes.format() == to) return boxes;
  if (!boxes.image_size()) throw MissingImageSize("conversion between normalized and absolute boxes");
  const double w = boxes.image_size()->width, h = boxes.image_size()->height;
  if (to == BoxFormat::kXyxyAbs) {
    Tensor out = cxcywh_to_xyxy(boxes.data());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= (i % 2 == 0) ? w : h;
    return BoxArray(std::move(out), to, boxes.image_size());
  }
  Tensor scaled = boxes.data();
  for (int64_t i = 0; i < scaled.numel(); ++i) scaled[i] /= (i % 2 == 0) ? w : h;
  return BoxArray(xyxy_to_cxcywh(scaled), to, boxes.image_size());
}

namespace {

void require_xyxy(const BoxArray& b, const char* op) {
  if (b.format() != BoxFormat::kXyxyAbs) throw InvalidBoxes(std::string(op) + " expects xyxy boxes");
}

struct PairTerms {
  double iou;
  double uni;
  double enclosing;
};

PairTerms pair_terms(const double* a, const double* b) {
  const double area_a = std::max(a[2] - a[0], 0.0) * std::max(a[3] - a[1], 0.0);
  const double area_b = std::max(b[2] - b[0], 0.0) * std::max(b[3] - b[1], 0.0);
  const double iw = std::max(std::min(a[2], b[2]) - std::max(a[0], b[0]), 0.0);
  const double ih = std::max(std::min(a[3], b[3]) - std::max(a[1], b[1]), 0.0);
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double enclosing = (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  PairTerms t{0.0, uni, enclosing};
  if (area_a > 0.0 && area_b > 0.0 && uni > 0.0) t.iou = inter / uni;
  return t;
}

}  // namespace

Tensor box_iou(const Tensor& a, const Tensor& b) {
  const int64_t m = a.numel() / 4, n = b.numel() / 4;
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = pair_terms(a.data() + i * 4, b.data() + j * 4).iou;
  return out;
}

Tensor box_iou(const BoxArray& a, const BoxArray& b) {
  require_xyxy(a, "box_iou");
  require_xyxy(b, "box_iou");
  return box_iou(a.data(), b.data());
}

Tensor generalized_iou(const Tensor& a, const Tensor& b) {
  const int64_t m = a.numel() / 4, n = b.numel() / 4;
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const auto t = pair_terms(a.data() + i * 4, b.data() + j * 4);
      const double penalty = t.enclosing > 0.0 ? (t.enclosing - t.uni) / t.enclosing : 0.0;
      out[i * n + j] = t.iou - penalty;
    }
  return out;
}

Tensor generalized_iou(const BoxArray& a, const BoxArray& b) {
  require_xyxy(a, "generalized_iou");
  require_xyxy(b, "generalized_iou");
  return generalized_iou(a.data(), b.data());
}

Assignment hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) throw ShapeMismatch("hungarian_match expects a matrix, got " + shape_str(cost.shape()));
  for (double v : cost.values())
    if (!std::isfinite(v)) throw NonFiniteCost("cost matrix contains NaN or Inf");
  const int64_t rows = cost.dim(0), cols = cost.dim(1);
  Assignment result;
  if (rows == 0 || cols == 0) return result;

  // Solve with the smaller side as rows.
  const bool flipped = rows > cols;
  const int64_t n = flipped ? cols : rows;
  const int64_t m = flipped ? rows : cols;
  auto at = [&](int64_t i, int64_t j) { return flipped ? cost.at(j, i) : cost.at(i, j); };

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0), v(static_cast<size_t>(m + 1), 0.0);
  std::vector<int64_t> owner(static_cast<size_t>(m + 1), 0), way(static_cast<size_t>(m + 1), 0);
  for (int64_t i = 1; i <= n; ++i) {
    owner[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m + 1), inf);
    std::vector<char> used(static_cast<size_t>(m + 1), 0);
    do {
      used[j0] = 1;
      const int64_t i0 = owner[j0];
      double delta = inf;
      int64_t j1 = 0;
      for (int64_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int64_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  for (int64_t j = 1; j <= m; ++j) {
    if (owner[j] == 0) continue;
    const int64_t r = owner[j] - 1, c = j - 1;
    result.pairs.emplace_back(flipped ? c : r, flipped ? r : c);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (const auto& [p, t] : result.pairs) result.total_cost += cost.at(p, t);
  return result;
}

double focal_class_cost(double p, double alpha, double gamma) {
  const double pos = alpha * std::pow(1.0 - p, gamma) * -std::log(p + 1e-8);
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + 1e-8);
  return pos - neg;
}

Tensor build_match_cost(const Tensor& class_prob, const BoxArray& pred_boxes, const std::vector<int64_t>& tgt_labels,
                        const BoxArray& tgt_boxes, const MatchWeights& weights) {
  if (class_prob.rank() != 2) throw ShapeMismatch("class_prob must be [M x C]");
  const int64_t m = class_prob.dim(0), classes = class_prob.dim(1);
  const auto t = static_cast<int64_t>(tgt_labels.size());
  if (pred_boxes.size() != m || tgt_boxes.size() != t) {
    throw ShapeMismatch("build_match_cost: " + std::to_string(m) + " predictions with " +
                        std::to_string(pred_boxes.size()) + " boxes, " + std::to_string(t) + " labels with " +
                        std::to_string(tgt_boxes.size()) + " boxes");
  }
  if (pred_boxes.format() != BoxFormat::kCxcywhNorm || tgt_boxes.format() != BoxFormat::kCxcywhNorm)
    throw InvalidBoxes("build_match_cost expects cxcywh_norm boxes");
  for (auto label : tgt_labels)
    if (label < 0 || label >= classes) throw ShapeMismatch("target label out of range: " + std::to_string(label));

  const Tensor giou = generalized_iou(cxcywh_to_xyxy(pred_boxes.data()), cxcywh_to_xyxy(tgt_boxes.data()));
  Tensor cost({m, t});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < t; ++j) {
      const double p = class_prob.at(i, tgt_labels[j]);
      double l1 = 0.0;
      for (int k = 0; k < 4; ++k) l1 += std::abs(pred_boxes.data()[i * 4 + k] - tgt_boxes.data()[j * 4 + k]);
      cost.at(i, j) = weights.class_weight * focal_class_cost(p, weights.alpha, weights.gamma) +
                      weights.l1_weight * l1 + weights.giou_weight * (1.0 - giou.at(i, j));
    }
  return cost;
}

namespace {

std::vector<int64_t> score_order(const std::vector<double>& scores) {
  std::vector<int64_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return scores[a] > scores[b]; });
  return order;
}

void check_nms_inputs(const BoxArray& boxes, const std::vector<double>& scores, double thr) {
  if (!(thr > 0.0 && thr <= 1.0)) throw BadThreshold("NMS threshold must be in (0, 1], got " + std::to_string(thr));
  require_xyxy(boxes, "nms");
  if (static_cast<int64_t>(scores.size()) != boxes.size()) throw ShapeMismatch("nms: scores/boxes length");
}

}  // namespace

std::vector<int64_t> nms(const BoxArray& boxes, const std::vector<double>& scores, double iou_threshold) {
  check_nms_inputs(boxes, scores, iou_threshold);
  std::vector<int64_t> keep;
  std::vector<char> suppressed(scores.size(), 0);
  const auto order = score_order(scores);
  const double* d = boxes.data().data();
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const int64_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int64_t j = order[oj];
      if (!suppressed[j] && pair_terms(d + i * 4, d + j * 4).iou > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

std::vector<int64_t> batched_nms(const BoxArray& boxes, const std::vector<double>& scores,
                                 const std::vector<int64_t>& labels, double iou_threshold) {
  check_nms_inputs(boxes, scores, iou_threshold);
  if (labels.size() != scores.size()) throw ShapeMismatch("batched_nms: labels length");
  std::vector<int64_t> keep;
  std::vector<char> suppressed(scores.size(), 0);
  const auto order = score_order(scores);
  const double* d = boxes.data().data();
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const int64_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int64_t j = order[oj];
      if (!suppressed[j] && labels[j] == labels[i] && pair_terms(d + i * 4, d + j * 4).iou > iou_threshold)
        suppressed[j] = 1;
    }
  }
  return keep;
}

}  // namespace detkit::geometry
