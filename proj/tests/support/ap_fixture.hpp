#pragma once

// Box-AP fixtures shared by the evaluator tests and the acceptance run.

#include <random>
#include <vector>

#include "detkit/evalbench.hpp"
#include "support/oracles.hpp"

namespace apfix {

using detkit::Shape;
using detkit::Tensor;
using detkit::evalbench::ApMetrics;
using detkit::evalbench::ImageDetections;
using detkit::evalbench::ImageGroundTruth;

using Box = std::array<double, 4>;

struct Fixture {
  std::vector<oracle::ApGt> gts;
  std::vector<oracle::ApDet> dets;
  int64_t images = 1, classes = 1;

  std::vector<ImageGroundTruth> ground_truth() const {
    std::vector<ImageGroundTruth> out(static_cast<size_t>(images));
    for (int64_t i = 0; i < images; ++i) out[static_cast<size_t>(i)].image_id = i;
    for (const auto& g : gts) {
      auto& im = out[static_cast<size_t>(g.image)];
      im.boxes = append(im.boxes, g.box);
      im.labels.push_back(g.cls);
      im.crowd.push_back(0);
    }
    return out;
  }
  std::vector<ImageDetections> predictions() const {
    std::vector<ImageDetections> out(static_cast<size_t>(images));
    for (int64_t i = 0; i < images; ++i) out[static_cast<size_t>(i)].image_id = i;
    for (const auto& d : dets) {
      auto& im = out[static_cast<size_t>(d.image)];
      im.boxes = append(im.boxes, d.box);
      im.labels.push_back(d.cls);
      im.scores.push_back(d.score);
    }
    return out;
  }
  ApMetrics evaluate() const { return detkit::evalbench::coco_ap_evaluate(predictions(), ground_truth(), classes); }

  static Tensor append(const Tensor& t, const Box& b) {
    std::vector<double> v(t.values().begin(), t.values().end());
    v.insert(v.end(), b.begin(), b.end());
    return Tensor(Shape{t.dim(0) + 1, 4}, std::move(v));
  }
};

// Objects on a coarse grid of cells so no two overlap; sizes span all
// three area bands. Detections are jittered copies, misses and clutter.
inline Fixture random_fixture(std::mt19937_64& rng, bool jitter = true) {
  Fixture f;
  f.images = 3;
  f.classes = 3;
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n(0, 3);
  for (int64_t im = 0; im < f.images; ++im)
    for (int cell = 0; cell < 4; ++cell) {
      if (u(rng) < 0.2) continue;
      const double x0 = 200.0 * (cell % 2), y0 = 200.0 * (cell / 2);
      const double side = std::vector<double>{20, 60, 140}[static_cast<size_t>(cell % 3)] * (0.8 + 0.3 * u(rng));
      Box g{x0 + 10, y0 + 10, x0 + 10 + side, y0 + 10 + side * (0.7 + 0.5 * u(rng))};
      const int64_t cls = static_cast<int64_t>(rng() % 3);
      f.gts.push_back({im, cls, g});
      const int copies = static_cast<int>(rng() % 3);
      for (int k = 0; k < copies; ++k) {
        Box d = g;
        if (jitter)
          for (double& v : d) v += n(rng) * side / 40.0;
        if (d[2] <= d[0] + 1) d[2] = d[0] + 1;
        if (d[3] <= d[1] + 1) d[3] = d[1] + 1;
        f.dets.push_back({im, u(rng) < 0.85 ? cls : static_cast<int64_t>(rng() % 3), d, u(rng)});
      }
    }
  for (int k = 0; k < 4; ++k) {
    const double x = 400 + 100 * u(rng), y = 400 + 100 * u(rng), s = 10 + 120 * u(rng);
    f.dets.push_back({static_cast<int64_t>(rng() % 3), static_cast<int64_t>(rng() % 3), {x, y, x + s, y + s}, u(rng)});
  }
  return f;
}

}  // namespace apfix
