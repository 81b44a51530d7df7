#pragma once

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "detkit/model/layers.hpp"

namespace detkit::model {

struct QueryInitOutput {
  QuerySet queries;
  std::optional<LayerOutput> proposals;  // encoder proposals (two-stage only)
};

// Query-initialization slot: builds the decoder's matching queries from the
// encoder memory.
class QueryInit : public nn::Module {
 public:
  virtual QueryInitOutput forward(const FlatMemory& memory, const Var& encoded) = 0;
  virtual int64_t num_queries() const = 0;
  virtual bool provides_anchors() const = 0;
};

// Learned queries independent of the image.
//   kPosition: zero content, learned positional query (+ anchors predicted
//              from it when `with_anchors`).
//   kAnchor:   learned content and learned anchor boxes.
class LearnedQueries : public QueryInit {
 public:
  enum class Mode { kPosition, kAnchor };
  LearnedQueries(int64_t num_queries, int64_t dim, Mode mode, bool with_anchors);
  QueryInitOutput forward(const FlatMemory& memory, const Var& encoded) override;
  int64_t num_queries() const override { return num_queries_; }
  bool provides_anchors() const override { return mode_ == Mode::kAnchor || with_anchors_; }

 private:
  int64_t num_queries_, dim_;
  Mode mode_;
  bool with_anchors_;
  std::shared_ptr<nn::Embedding> content_, position_, anchors_;
  std::shared_ptr<nn::Linear> ref_head_;
};

// Indices of the k largest scores (descending; ties by lower index),
// skipping entries flagged in `invalid`. Throws KTooLarge when fewer than k
// valid entries exist.
std::vector<int64_t> two_stage_select(const std::vector<double>& scores, const Mask& invalid, int64_t k);

// Initial per-token proposals: token center in the valid region with side
// 0.05 * 2^level. Tokens that are padded or too close to the border are
// flagged invalid. Returns [L x 4] cxcywh.
Tensor token_proposals(const FlatMemory& m, Mask& invalid);

// Encoder tokens scored as proposals; the top-k refined boxes seed the
// decoder anchors (detached).
class TwoStageQueries : public QueryInit {
 public:
  enum class Content { kLearned, kFromProposals };
  TwoStageQueries(int64_t num_queries, int64_t dim, int64_t num_classes, Content content);
  QueryInitOutput forward(const FlatMemory& memory, const Var& encoded) override;
  int64_t num_queries() const override { return num_queries_; }
  bool provides_anchors() const override { return true; }

 private:
  int64_t num_queries_, dim_;
  Content content_mode_;
  std::shared_ptr<nn::Linear> memory_proj_;
  std::shared_ptr<nn::LayerNorm> memory_norm_;
  std::shared_ptr<nn::Linear> class_head_;
  std::shared_ptr<nn::MLP> box_head_;
  std::shared_ptr<nn::Embedding> content_;
  std::shared_ptr<nn::Linear> content_proj_;
  std::shared_ptr<nn::LayerNorm> content_norm_;
};

struct DenoisingOptions {
  int num_groups = 0;
  double label_noise_ratio = 0.2;
  double box_noise_scale = 0.4;
  bool contrastive = false;
};

struct DenoisingGroups {
  std::vector<int64_t> labels;  // noised input labels, one per dn query
  Tensor boxes;                 // [N_dn x 4] noised cxcywh
  DenoisingMeta meta;
};

// Per group, each GT spawns a positive noised copy (and in contrastive mode a
// negative copy with jitter in [1, 2) x scale). Throws NoTargets on empty GT.
DenoisingGroups build_denoising_groups(const std::vector<int64_t>& gt_labels, const Tensor& gt_boxes,
                                       const DenoisingOptions& opts, int64_t num_classes, std::mt19937_64& rng);

// [Q_total x Q_total] mask, dn queries first: each dn group sees only
// itself, matching queries see only matching queries.
Mask build_dn_attention_mask(const DenoisingMeta& meta, int64_t num_matching);

// Owns the label embedding for dn queries and prepends them to a QuerySet.
class DenoisingGenerator : public nn::Module {
 public:
  DenoisingGenerator(int64_t num_classes, int64_t dim, DenoisingOptions opts);
  // Returns the input unchanged when num_groups == 0 or there are no targets.
  QuerySet extend(const QuerySet& queries, const Targets& targets, std::mt19937_64& rng) const;
  const DenoisingOptions& options() const { return opts_; }

 private:
  int64_t num_classes_;
  DenoisingOptions opts_;
  std::shared_ptr<nn::Embedding> label_embed_;
};

}  // namespace detkit::model
