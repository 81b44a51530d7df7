#pragma once

// Independent reference implementations the tests compare the library
// against. Nothing here calls into the code under test except for types.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "detkit/autograd.hpp"
#include "detkit/tensor.hpp"

namespace oracle {

// Minimum total cost over every one-to-one matching of size min(M, N), by
// enumerating permutations of the larger side.
inline double brute_force_min_cost(const detkit::Tensor& cost) {
  const int64_t m = cost.dim(0), n = cost.dim(1);
  const bool rows_small = m <= n;
  const int64_t k = std::min(m, n), big = std::max(m, n);
  std::vector<int64_t> perm(static_cast<size_t>(big));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int64_t i = 0; i < k; ++i) c += rows_small ? cost.at(i, perm[i]) : cost.at(perm[i], i);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline double iou_xyxy(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double aa = (a[2] - a[0]) * (a[3] - a[1]);
  const double ab = (b[2] - b[0]) * (b[3] - b[1]);
  if (aa <= 0 || ab <= 0) return 0.0;
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  return inter / (aa + ab - inter);
}

// Quadratic greedy suppression straight from the definition.
inline std::vector<int64_t> reference_nms(const std::vector<std::array<double, 4>>& boxes,
                                          const std::vector<double>& scores, double threshold) {
  const size_t n = boxes.size();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<bool> dead(n, false);
  std::vector<int64_t> kept;
  for (size_t i = 0; i < n; ++i) {
    const int64_t a = order[i];
    if (dead[a]) continue;
    kept.push_back(a);
    for (size_t j = i + 1; j < n; ++j)
      if (iou_xyxy(boxes[a], boxes[order[j]]) > threshold) dead[order[j]] = true;
  }
  return kept;
}

// 101-point interpolated AP of a single ranked list: `tp` flags in score
// order, `num_gt` positives.
inline double interpolated_ap(const std::vector<int>& tp, int num_gt) {
  std::vector<double> prec, rec;
  int t = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    t += tp[i];
    prec.push_back(static_cast<double>(t) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(t) / num_gt);
  }
  double s = 0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    double best = 0;
    for (size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= thr - 1e-12) best = std::max(best, prec[i]);
    s += best;
  }
  return s / 101.0;
}

struct ApGt {
  int64_t image = 0, cls = 0;
  std::array<double, 4> box{};
};
struct ApDet {
  int64_t image = 0, cls = 0;
  std::array<double, 4> box{};
  double score = 0;
};

// Box AP for one IoU threshold and one area band [lo, hi], averaged over
// classes that have ground truth in the band; -1 when none do. Greedy in
// descending score: each detection takes its best untaken in-band object,
// else its best untaken out-of-band object (ignored), else counts as a
// false positive when its own area lies in the band. No crowd handling.
inline double band_ap(const std::vector<ApDet>& dets, const std::vector<ApGt>& gts, int64_t classes, double thr,
                      double lo, double hi) {
  auto area = [](const std::array<double, 4>& b) { return (b[2] - b[0]) * (b[3] - b[1]); };
  auto in_band = [&](const std::array<double, 4>& b) { return area(b) >= lo && area(b) <= hi; };
  double sum = 0;
  int defined = 0;
  for (int64_t c = 0; c < classes; ++c) {
    int num_gt = 0;
    for (const auto& g : gts)
      if (g.cls == c && in_band(g.box)) ++num_gt;
    if (num_gt == 0) continue;
    std::vector<const ApDet*> order;
    for (const auto& d : dets)
      if (d.cls == c) order.push_back(&d);
    std::stable_sort(order.begin(), order.end(), [](const ApDet* a, const ApDet* b) { return a->score > b->score; });
    std::vector<bool> taken(gts.size(), false);
    std::vector<int> tp;
    for (const ApDet* d : order) {
      int best = -1;
      for (int pass = 0; pass < 2 && best < 0; ++pass) {
        double best_iou = std::min(thr, 1 - 1e-10);
        for (size_t g = 0; g < gts.size(); ++g) {
          if (taken[g] || gts[g].cls != c || gts[g].image != d->image) continue;
          if (in_band(gts[g].box) != (pass == 0)) continue;
          const double v = iou_xyxy(d->box, gts[g].box);
          if (v >= best_iou) best_iou = v, best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        taken[static_cast<size_t>(best)] = true;
        if (in_band(gts[static_cast<size_t>(best)].box)) tp.push_back(1);
      } else if (in_band(d->box)) {
        tp.push_back(0);
      }
    }
    sum += interpolated_ap(tp, num_gt);
    ++defined;
  }
  return defined ? sum / defined : -1.0;
}

// {AP, AP50, AP75, APs, APm, APl} with the usual thresholds and bands.
inline std::array<double, 6> coco_metrics(const std::vector<ApDet>& dets, const std::vector<ApGt>& gts,
                                          int64_t classes) {
  const double big = 1e10, s = 32.0 * 32.0, l = 96.0 * 96.0;
  auto mean_over_t = [&](double lo, double hi) {
    double acc = 0;
    for (int i = 0; i < 10; ++i) {
      const double v = band_ap(dets, gts, classes, 0.5 + 0.05 * i, lo, hi);
      if (v < 0) return -1.0;
      acc += v;
    }
    return acc / 10;
  };
  return {mean_over_t(0, big), band_ap(dets, gts, classes, 0.5, 0, big), band_ap(dets, gts, classes, 0.75, 0, big),
          mean_over_t(0, s), mean_over_t(s, l), mean_over_t(l, big)};
}

struct GradCheck {
  double worst_rel = 0;  // max over entries of |a - n| / max(|a|, |n|, floor)
  bool ok = true;
};

// Central differences of a scalar function of several inputs against the
// tape's gradient. `f` must rebuild the graph from the given Vars.
inline GradCheck check_gradients(const std::function<detkit::Var(const std::vector<detkit::Var>&)>& f,
                                 std::vector<detkit::Tensor> inputs, double tol = 1e-4, double h = 1e-6,
                                 double floor = 1e-6) {
  std::vector<detkit::Var> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  f(vars).backward();
  GradCheck out;
  for (size_t k = 0; k < inputs.size(); ++k) {
    const detkit::Tensor analytic = vars[k].grad();
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      auto eval = [&](double delta) {
        std::vector<detkit::Var> vs;
        for (size_t j = 0; j < inputs.size(); ++j) {
          detkit::Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          vs.emplace_back(t, false);
        }
        return f(vs).value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      // Absolute agreement below the floor counts as agreement.
      const double err = std::abs(a - numeric) < floor * tol ? 0.0 : rel;
      out.worst_rel = std::max(out.worst_rel, err);
    }
  }
  out.ok = out.worst_rel <= tol;
  return out;
}

inline std::array<double, 4> random_xyxy(std::mt19937_64& rng, double extent, double min_side = 1.0) {
  std::uniform_real_distribution<double> pos(0.0, extent * 0.8), side(min_side, extent * 0.4);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + side(rng), y + side(rng)};
}

}  // namespace oracle
