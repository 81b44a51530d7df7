#include "detkit/model/query.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detkit/geometry.hpp"

namespace detkit::model {

using namespace detkit::ops;

LearnedQueries::LearnedQueries(int64_t num_queries, int64_t dim, Mode mode, bool with_anchors)
    : num_queries_(num_queries), dim_(dim), mode_(mode), with_anchors_(with_anchors) {
  if (num_queries <= 0 || dim <= 0) throw BadDim("LearnedQueries: num_queries and dim must be positive");
  if (mode == Mode::kPosition) {
    position_ = register_module("query_pos", std::make_shared<nn::Embedding>(num_queries, dim));
    if (with_anchors) {
      ref_head_ = register_module("reference_points", std::make_shared<nn::Linear>(dim, 4));
      ref_head_->tag_untagged(nn::ParamTag::kOffsetsRefPoints);
    }
  } else {
    content_ = register_module("query_content", std::make_shared<nn::Embedding>(num_queries, dim));
    anchors_ = register_module("refpoint_embed", std::make_shared<nn::Embedding>(num_queries, 4));
    anchors_->tag_untagged(nn::ParamTag::kOffsetsRefPoints);
  }
}

QueryInitOutput LearnedQueries::forward(const FlatMemory&, const Var&) {
  QueryInitOutput out;
  QuerySet& q = out.queries;
  q.num_matching = num_queries_;
  if (mode_ == Mode::kPosition) {
    q.content = Var(Tensor::zeros({num_queries_, dim_}));
    q.position = position_->all();
    if (ref_head_) q.anchors = sigmoid(ref_head_->forward(q.position));
  } else {
    q.content = content_->all();
    q.anchors = sigmoid(anchors_->all());
  }
  return out;
}

std::vector<int64_t> two_stage_select(const std::vector<double>& scores, const Mask& invalid, int64_t k) {
  std::vector<int64_t> idx;
  for (size_t i = 0; i < scores.size(); ++i)
    if (invalid.empty() || !invalid[i]) idx.push_back(static_cast<int64_t>(i));
  if (k < 0 || k > static_cast<int64_t>(idx.size()))
    throw KTooLarge("two-stage top-k " + std::to_string(k) + " exceeds " + std::to_string(idx.size()) +
                    " valid tokens");
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

Tensor token_proposals(const FlatMemory& m, Mask& invalid) {
  Tensor props({m.size(), 4});
  invalid.assign(static_cast<size_t>(m.size()), 0);
  for (size_t l = 0; l < m.shapes.size(); ++l) {
    const auto [h, w] = m.shapes[l];
    const auto [vx, vy] = m.valid_ratios[l];
    const double side = 0.05 * std::pow(2.0, static_cast<double>(l));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t t = m.level_start[l] + y * w + x;
        const double cx = (static_cast<double>(x) + 0.5) / std::max(vx * static_cast<double>(w), 1e-6);
        const double cy = (static_cast<double>(y) + 0.5) / std::max(vy * static_cast<double>(h), 1e-6);
        props.at(t, 0) = std::clamp(cx, 0.0, 1.0);
        props.at(t, 1) = std::clamp(cy, 0.0, 1.0);
        props.at(t, 2) = side;
        props.at(t, 3) = side;
        const bool inside = cx > 0.01 && cx < 0.99 && cy > 0.01 && cy < 0.99;
        invalid[static_cast<size_t>(t)] = (m.padding[static_cast<size_t>(t)] || !inside) ? 1 : 0;
      }
  }
  return props;
}

TwoStageQueries::TwoStageQueries(int64_t num_queries, int64_t dim, int64_t num_classes, Content content)
    : num_queries_(num_queries), dim_(dim), content_mode_(content) {
  if (num_queries <= 0) throw BadDim("TwoStageQueries: num_queries must be positive");
  memory_proj_ = register_module("enc_output", std::make_shared<nn::Linear>(dim, dim));
  memory_norm_ = register_module("enc_output_norm", std::make_shared<nn::LayerNorm>(dim));
  class_head_ = register_module("enc_class_head", std::make_shared<nn::Linear>(dim, num_classes));
  auto& b = class_head_->bias().mutable_value();
  b.fill(-std::log((1.0 - 0.01) / 0.01));
  box_head_ = register_module("enc_box_head", std::make_shared<nn::MLP>(dim, dim, 4, 3));
  box_head_->last().weight().mutable_value().fill(0.0);
  box_head_->last().bias().mutable_value().fill(0.0);
  if (content == Content::kLearned) {
    content_ = register_module("query_content", std::make_shared<nn::Embedding>(num_queries, dim));
  } else {
    content_proj_ = register_module("pos_trans", std::make_shared<nn::Linear>(2 * dim, dim));
    content_norm_ = register_module("pos_trans_norm", std::make_shared<nn::LayerNorm>(dim));
  }
}

QueryInitOutput TwoStageQueries::forward(const FlatMemory& memory, const Var& encoded) {
  Mask invalid;
  const Tensor props = token_proposals(memory, invalid);
  Var out_memory = memory_norm_->forward(memory_proj_->forward(zero_rows(encoded, invalid)));
  Var logits = class_head_->forward(out_memory);
  Var unact = add(box_head_->forward(out_memory), inverse_sigmoid(Var(props)));

  const int64_t L = logits.dim(0), C = logits.dim(1);
  std::vector<double> scores(static_cast<size_t>(L));
  for (int64_t t = 0; t < L; ++t) {
    double best = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < C; ++c) best = std::max(best, logits.value().at(t, c));
    scores[static_cast<size_t>(t)] = best;
  }
  const auto idx = two_stage_select(scores, invalid, num_queries_);
  Var boxes = sigmoid(gather_rows(unact, idx));

  QueryInitOutput out;
  out.proposals = LayerOutput{gather_rows(logits, idx), boxes};
  QuerySet& q = out.queries;
  q.num_matching = num_queries_;
  q.anchors = boxes.detach();
  if (content_mode_ == Content::kLearned) {
    q.content = content_->all();
  } else {
    q.content = content_norm_->forward(content_proj_->forward(anchor_sine_embedding(q.anchors, dim_)));
  }
  return out;
}

DenoisingGroups build_denoising_groups(const std::vector<int64_t>& gt_labels, const Tensor& gt_boxes,
                                       const DenoisingOptions& opts, int64_t num_classes, std::mt19937_64& rng) {
  const auto n = static_cast<int64_t>(gt_labels.size());
  if (n == 0) throw NoTargets("denoising needs at least one ground-truth object");
  if (gt_boxes.dim(0) != n) throw ShapeMismatch("denoising: labels and boxes disagree");
  if (opts.label_noise_ratio < 0 || opts.box_noise_scale < 0 || opts.num_groups < 0)
    throw BadDim("denoising noise parameters must be >= 0");
  DenoisingGroups g;
  g.meta.num_groups = opts.num_groups;
  g.meta.num_gt = n;
  g.meta.contrastive = opts.contrastive;
  g.meta.queries_per_group = opts.contrastive ? 2 * n : n;
  const int64_t total = g.meta.total();
  g.boxes = Tensor({total, 4});
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int64_t> any_class(0, std::max<int64_t>(num_classes - 1, 0));

  int64_t row = 0;
  for (int grp = 0; grp < opts.num_groups; ++grp) {
    for (int neg = 0; neg < (opts.contrastive ? 2 : 1); ++neg) {
      for (int64_t i = 0; i < n; ++i, ++row) {
        int64_t label = gt_labels[static_cast<size_t>(i)];
        if (opts.label_noise_ratio > 0 && u01(rng) < opts.label_noise_ratio) label = any_class(rng);
        g.labels.push_back(label);
        g.meta.target_index.push_back(neg ? -1 : i);
        // Jitter corners by up to half the box size times the scale; negatives
        // land in [1, 2) of that range.
        const double cx = gt_boxes.at(i, 0), cy = gt_boxes.at(i, 1), w = gt_boxes.at(i, 2), h = gt_boxes.at(i, 3);
        double xyxy[4] = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
        const double half[4] = {w / 2, h / 2, w / 2, h / 2};
        if (opts.box_noise_scale > 0) {
          for (int k = 0; k < 4; ++k) {
            const double sign = u01(rng) < 0.5 ? -1.0 : 1.0;
            const double mag = u01(rng) + (neg ? 1.0 : 0.0);
            xyxy[k] += sign * mag * half[k] * opts.box_noise_scale;
            xyxy[k] = std::clamp(xyxy[k], 0.0, 1.0);
          }
        }
        const double x1 = std::min(xyxy[0], xyxy[2]), x2 = std::max(xyxy[0], xyxy[2]);
        const double y1 = std::min(xyxy[1], xyxy[3]), y2 = std::max(xyxy[1], xyxy[3]);
        g.boxes.at(row, 0) = (x1 + x2) / 2;
        g.boxes.at(row, 1) = (y1 + y2) / 2;
        g.boxes.at(row, 2) = x2 - x1;
        g.boxes.at(row, 3) = y2 - y1;
      }
    }
  }
  return g;
}

Mask build_dn_attention_mask(const DenoisingMeta& meta, int64_t num_matching) {
  const int64_t nd = meta.total();
  const int64_t q = nd + num_matching;
  Mask mask(static_cast<size_t>(q * q), 1);
  auto open = [&](int64_t start, int64_t len) {
    for (int64_t i = start; i < start + len; ++i)
      for (int64_t j = start; j < start + len; ++j) mask[static_cast<size_t>(i * q + j)] = 0;
  };
  for (int g = 0; g < meta.num_groups; ++g) open(g * meta.queries_per_group, meta.queries_per_group);
  open(nd, num_matching);
  return mask;
}

DenoisingGenerator::DenoisingGenerator(int64_t num_classes, int64_t dim, DenoisingOptions opts)
    : num_classes_(num_classes), opts_(opts) {
  label_embed_ = register_module("label_enc", std::make_shared<nn::Embedding>(num_classes, dim));
}

QuerySet DenoisingGenerator::extend(const QuerySet& queries, const Targets& targets, std::mt19937_64& rng) const {
  if (opts_.num_groups == 0 || targets.size() == 0) return queries;
  if (!queries.has_anchors()) throw SlotError("denoising requires a query initializer that provides anchors");
  if (queries.position.numel() > 0) throw SlotError("denoising is incompatible with learned positional queries");
  DenoisingGroups g = build_denoising_groups(targets.labels, targets.boxes, opts_, num_classes_, rng);
  QuerySet out;
  out.content = concat_rows({label_embed_->rows(g.labels), queries.content});
  out.anchors = concat_rows({Var(g.boxes), queries.anchors});
  out.num_matching = queries.num_matching;
  out.self_attn_mask = build_dn_attention_mask(g.meta, queries.num_matching);
  out.dn = std::move(g.meta);
  return out;
}

}  // namespace detkit::model
