#pragma once

#include <atomic>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "detkit/geometry.hpp"
#include "detkit/model/types.hpp"

namespace detkit::criterion {

DETKIT_DEFINE_ERROR(BadParams);

struct LossWeights {
  double class_weight = 1.0;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
  bool aux_enabled = true;
  double dn_weight = 1.0;
};

// Sigmoid focal loss over [Q x C] logits; classes[q] is the target class or
// -1 for background. Sum divided by max(1, num_targets). alpha < 0 disables
// the class-balance term.
Var focal_loss(const Var& logits, const std::vector<int64_t>& classes, double alpha, double gamma,
               double num_targets);

struct BoxLosses {
  Var l1;    // mean over pairs of |p - t|_1
  Var giou;  // mean over pairs of 1 - GIoU
  bool empty = false;
};
BoxLosses box_losses(const Var& pred_cxcywh, const Tensor& tgt_cxcywh);

class HungarianMatcher {
 public:
  explicit HungarianMatcher(geometry::MatchWeights w = {}) : weights_(w) {}
  geometry::Assignment match(const model::LayerOutput& out, const model::Targets& targets) const;
  const geometry::MatchWeights& weights() const { return weights_; }
  geometry::MatchWeights& mutable_weights() { return weights_; }
  int64_t calls() const { return calls_.load(); }

 private:
  geometry::MatchWeights weights_;
  mutable std::atomic<int64_t> calls_{0};
};

struct LossReport {
  std::map<std::string, double> components;  // weighted, by name
  Var total;
  double total_value() const { return total.value().item(); }
};

class SetCriterion {
 public:
  // When `tie_matcher_class_weight` is set the matcher's class-cost weight
  // follows weights.class_weight.
  SetCriterion(int64_t num_classes, LossWeights weights, geometry::MatchWeights matcher = {},
               bool tie_matcher_class_weight = true, double focal_alpha = 0.25, double focal_gamma = 2.0);

  LossReport operator()(const std::vector<model::DetectionOutput>& outputs,
                        const std::vector<model::Targets>& targets) const;

  const HungarianMatcher& matcher() const { return matcher_; }
  const LossWeights& weights() const { return weights_; }
  int64_t num_classes() const { return num_classes_; }

 private:
  void add_matched(const std::vector<const model::LayerOutput*>& layer, const std::vector<model::Targets>& targets,
                   double normalizer, const std::string& suffix, double scale, LossReport& report,
                   std::vector<Var>& terms) const;
  void add_denoising(const std::vector<const model::LayerOutput*>& layer,
                     const std::vector<const model::DenoisingMeta*>& meta, const std::vector<model::Targets>& targets,
                     double normalizer, const std::string& suffix, LossReport& report, std::vector<Var>& terms) const;

  int64_t num_classes_;
  LossWeights weights_;
  HungarianMatcher matcher_;
  double alpha_, gamma_;
};

}  // namespace detkit::criterion
