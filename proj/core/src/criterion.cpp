#include "detkit/criterion.hpp"

#include <algorithm>
#include <cmath>

namespace detkit::criterion {

using namespace detkit::ops;
using model::DetectionOutput;
using model::LayerOutput;
using model::Targets;

Var focal_loss(const Var& logits, const std::vector<int64_t>& classes, double alpha, double gamma,
               double num_targets) {
  if (alpha > 1.0 || gamma < 0.0 || !std::isfinite(gamma)) throw BadParams("focal loss: alpha in [0,1], gamma >= 0");
  const int64_t Q = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(classes.size()) != Q) throw ShapeMismatch("focal loss: one class per query expected");
  Tensor onehot({Q, C});
  for (int64_t q = 0; q < Q; ++q) {
    const int64_t c = classes[static_cast<size_t>(q)];
    if (c >= C) throw ShapeMismatch("focal loss: class index out of range");
    if (c >= 0) onehot.at(q, c) = 1.0;
  }
  std::optional<double> a;
  if (alpha >= 0) a = alpha;
  return scale(sigmoid_focal_loss(logits, onehot, a, gamma), 1.0 / std::max(1.0, num_targets));
}

BoxLosses box_losses(const Var& pred_cxcywh, const Tensor& tgt_cxcywh) {
  BoxLosses out;
  const int64_t n = pred_cxcywh.dim(0);
  if (n == 0) {
    out.l1 = Var(Tensor::scalar(0.0));
    out.giou = Var(Tensor::scalar(0.0));
    out.empty = true;
    return out;
  }
  out.l1 = scale(l1_loss(pred_cxcywh, tgt_cxcywh), 1.0 / static_cast<double>(n));
  out.giou = scale(giou_loss(pred_cxcywh, tgt_cxcywh), 1.0 / static_cast<double>(n));
  return out;
}

geometry::Assignment HungarianMatcher::match(const LayerOutput& out, const Targets& targets) const {
  calls_.fetch_add(1);
  const int64_t Q = out.logits.dim(0), C = out.logits.dim(1);
  if (targets.size() == 0) return {};
  Tensor prob({Q, C});
  for (int64_t i = 0; i < Q * C; ++i) prob[i] = 1.0 / (1.0 + std::exp(-out.logits.value()[i]));
  const geometry::BoxArray pred(out.boxes.value(), geometry::BoxFormat::kCxcywhNorm);
  const geometry::BoxArray tgt(targets.boxes, geometry::BoxFormat::kCxcywhNorm);
  return geometry::hungarian_match(geometry::build_match_cost(prob, pred, targets.labels, tgt, weights_));
}

SetCriterion::SetCriterion(int64_t num_classes, LossWeights weights, geometry::MatchWeights matcher,
                           bool tie_matcher_class_weight, double focal_alpha, double focal_gamma)
    : num_classes_(num_classes), weights_(weights), matcher_(matcher), alpha_(focal_alpha), gamma_(focal_gamma) {
  if (weights.class_weight < 0 || weights.l1_weight < 0 || weights.giou_weight < 0 || weights.dn_weight < 0)
    throw BadParams("loss weights must be >= 0");
  if (tie_matcher_class_weight) matcher_.mutable_weights().class_weight = weights.class_weight;
  matcher_.mutable_weights().alpha = focal_alpha;
  matcher_.mutable_weights().gamma = focal_gamma;
}

namespace {

Var sum_terms(const std::vector<Var>& terms) {
  if (terms.empty()) return Var(Tensor::scalar(0.0));
  Var acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

void record(LossReport& report, std::vector<Var>& terms, const std::string& name, const Var& v) {
  report.components[name] = v.value().item();
  terms.push_back(v);
}

}  // namespace

void SetCriterion::add_matched(const std::vector<const LayerOutput*>& layer, const std::vector<Targets>& targets,
                               double normalizer, const std::string& suffix, double scale_by, LossReport& report,
                               std::vector<Var>& terms) const {
  std::vector<Var> cls, l1, giou;
  for (size_t b = 0; b < layer.size(); ++b) {
    const LayerOutput& out = *layer[b];
    const Targets& t = targets[b];
    const auto assignment = matcher_.match(out, t);
    std::vector<int64_t> classes(static_cast<size_t>(out.logits.dim(0)), -1);
    std::vector<int64_t> rows;
    Tensor tgt_boxes({static_cast<int64_t>(assignment.pairs.size()), 4});
    for (size_t k = 0; k < assignment.pairs.size(); ++k) {
      const auto [p, g] = assignment.pairs[k];
      classes[static_cast<size_t>(p)] = t.labels[static_cast<size_t>(g)];
      rows.push_back(p);
      for (int c = 0; c < 4; ++c) tgt_boxes.at(static_cast<int64_t>(k), c) = t.boxes.at(g, c);
    }
    cls.push_back(sigmoid_focal_loss(out.logits, [&] {
      Tensor onehot(out.logits.shape());
      for (size_t q = 0; q < classes.size(); ++q)
        if (classes[q] >= 0) onehot.at(static_cast<int64_t>(q), classes[q]) = 1.0;
      return onehot;
    }(), alpha_ >= 0 ? std::optional<double>(alpha_) : std::nullopt, gamma_));
    if (!rows.empty()) {
      Var pred = gather_rows(out.boxes, rows);
      l1.push_back(l1_loss(pred, tgt_boxes));
      giou.push_back(giou_loss(pred, tgt_boxes));
    }
  }
  const double k = scale_by / normalizer;
  record(report, terms, "loss_class" + suffix, scale(sum_terms(cls), weights_.class_weight * k));
  record(report, terms, "loss_bbox" + suffix, scale(sum_terms(l1), weights_.l1_weight * k));
  record(report, terms, "loss_giou" + suffix, scale(sum_terms(giou), weights_.giou_weight * k));
}

void SetCriterion::add_denoising(const std::vector<const LayerOutput*>& layer,
                                 const std::vector<const model::DenoisingMeta*>& meta,
                                 const std::vector<Targets>& targets, double normalizer, const std::string& suffix,
                                 LossReport& report, std::vector<Var>& terms) const {
  std::vector<Var> cls, l1, giou;
  for (size_t b = 0; b < layer.size(); ++b) {
    if (!layer[b] || !meta[b]) continue;
    const LayerOutput& out = *layer[b];
    const auto& m = *meta[b];
    const Targets& t = targets[b];
    Tensor onehot(out.logits.shape());
    std::vector<int64_t> rows;
    std::vector<int64_t> gts;
    for (size_t q = 0; q < m.target_index.size(); ++q) {
      const int64_t g = m.target_index[q];
      if (g < 0) continue;
      onehot.at(static_cast<int64_t>(q), t.labels[static_cast<size_t>(g)]) = 1.0;
      rows.push_back(static_cast<int64_t>(q));
      gts.push_back(g);
    }
    cls.push_back(
        sigmoid_focal_loss(out.logits, onehot, alpha_ >= 0 ? std::optional<double>(alpha_) : std::nullopt, gamma_));
    if (!rows.empty()) {
      Tensor tgt_boxes({static_cast<int64_t>(rows.size()), 4});
      for (size_t k = 0; k < gts.size(); ++k)
        for (int c = 0; c < 4; ++c) tgt_boxes.at(static_cast<int64_t>(k), c) = t.boxes.at(gts[k], c);
      Var pred = gather_rows(out.boxes, rows);
      l1.push_back(l1_loss(pred, tgt_boxes));
      giou.push_back(giou_loss(pred, tgt_boxes));
    }
  }
  const double k = weights_.dn_weight / normalizer;
  record(report, terms, "loss_class_dn" + suffix, scale(sum_terms(cls), weights_.class_weight * k));
  record(report, terms, "loss_bbox_dn" + suffix, scale(sum_terms(l1), weights_.l1_weight * k));
  record(report, terms, "loss_giou_dn" + suffix, scale(sum_terms(giou), weights_.giou_weight * k));
}

LossReport SetCriterion::operator()(const std::vector<DetectionOutput>& outputs,
                                    const std::vector<Targets>& targets) const {
  if (outputs.size() != targets.size()) throw ShapeMismatch("criterion: outputs and targets disagree on batch size");
  LossReport report;
  std::vector<Var> terms;
  if (outputs.empty()) {
    report.total = Var(Tensor::scalar(0.0));
    return report;
  }
  double num_boxes = 0;
  for (const auto& t : targets) num_boxes += static_cast<double>(t.size());
  const double normalizer = std::max(1.0, num_boxes);

  const size_t layers = outputs[0].per_layer.size();
  for (const auto& o : outputs)
    if (o.per_layer.size() != layers) throw ShapeMismatch("criterion: images disagree on decoder depth");
  for (size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    if (!last && !weights_.aux_enabled) continue;
    std::vector<const LayerOutput*> layer;
    for (const auto& o : outputs) layer.push_back(&o.per_layer[l]);
    add_matched(layer, targets, normalizer, last ? "" : "_" + std::to_string(l), 1.0, report, terms);
  }
  if (outputs[0].encoder_proposals) {
    std::vector<const LayerOutput*> layer;
    for (const auto& o : outputs) layer.push_back(&*o.encoder_proposals);
    add_matched(layer, targets, normalizer, "_enc", 1.0, report, terms);
  }

  bool any_dn = false;
  double dn_positive = 0;
  for (size_t b = 0; b < outputs.size(); ++b)
    if (outputs[b].dn) {
      any_dn = true;
      dn_positive += static_cast<double>(outputs[b].dn->num_gt * outputs[b].dn->num_groups);
    }
  if (any_dn) {
    for (size_t l = 0; l < layers; ++l) {
      const bool last = l + 1 == layers;
      if (!last && !weights_.aux_enabled) continue;
      std::vector<const LayerOutput*> layer;
      std::vector<const model::DenoisingMeta*> meta;
      for (const auto& o : outputs) {
        const bool has = o.dn && o.dn_per_layer.size() == layers;
        layer.push_back(has ? &o.dn_per_layer[l] : nullptr);
        meta.push_back(has ? &*o.dn : nullptr);
      }
      add_denoising(layer, meta, targets, std::max(1.0, dn_positive), last ? "" : "_" + std::to_string(l), report,
                    terms);
    }
  }
  report.total = sum_terms(terms);
  return report;
}

}  // namespace detkit::criterion
