#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "detkit/autograd.hpp"
#include "detkit/errors.hpp"
#include "detkit/ops.hpp"

namespace detkit::model {

DETKIT_DEFINE_ERROR(KTooLarge);
DETKIT_DEFINE_ERROR(NoTargets);
DETKIT_DEFINE_ERROR(BadTopK);
DETKIT_DEFINE_ERROR(SlotError);

using Mask = std::vector<uint8_t>;  // row-major, nonzero = padded / blocked

struct FeatureLevel {
  Var map;  // [C x H x W]
  int stride = 1;
  Mask padding;  // [H x W]
  int64_t height() const { return map.dim(1); }
  int64_t width() const { return map.dim(2); }
  int64_t channels() const { return map.dim(0); }
};

struct FeaturePyramid {
  std::vector<FeatureLevel> levels;
  // Throws ShapeMismatch unless strides increase strictly and masks match.
  void validate(bool same_channels) const;
};

// Nearest-neighbour resize of a padding mask, as used to derive per-level masks.
Mask resize_mask(const Mask& mask, int64_t h, int64_t w, int64_t out_h, int64_t out_w);

// A pyramid serialized to tokens, the input of encoders and deformable decoders.
struct FlatMemory {
  Var tokens;     // [L x D]
  Var pos;        // [L x D], no gradient
  std::vector<ops::LevelShape> shapes;
  std::vector<int64_t> level_start;
  std::vector<int64_t> level_index;  // [L]
  Mask padding;                      // [L]
  std::vector<std::array<double, 2>> valid_ratios;  // per level (x, y)
  int64_t size() const { return tokens.dim(0); }
};

struct DenoisingMeta {
  int num_groups = 0;
  int64_t queries_per_group = 0;  // num_gt, doubled in contrastive mode
  int64_t num_gt = 0;
  bool contrastive = false;
  // Per dn query: target index into the image's GT list, or -1 for a
  // background (negative) query.
  std::vector<int64_t> target_index;
  int64_t total() const { return num_groups * queries_per_group; }
};

struct QuerySet {
  Var content;   // [Q x D]
  Var anchors;   // [Q x 4] cxcywh in (0,1), or empty
  Var position;  // [Q x D] learned positional query, or empty
  int64_t num_matching = 0;
  std::optional<DenoisingMeta> dn;  // dn queries occupy the first dn->total() rows
  Mask self_attn_mask;              // [Q_total x Q_total], empty when unused
  bool has_anchors() const { return anchors.numel() > 0; }
  int64_t total() const { return content.dim(0); }
};

struct LayerOutput {
  Var logits;  // [Q x C]
  Var boxes;   // [Q x 4] cxcywh in [0,1]
};

struct DetectionOutput {
  std::vector<LayerOutput> per_layer;
  std::optional<LayerOutput> encoder_proposals;
  std::vector<LayerOutput> dn_per_layer;
  std::optional<DenoisingMeta> dn;
};

// Ground truth for one image, boxes cxcywh normalized to the true image extent.
struct Targets {
  std::vector<int64_t> labels;
  Tensor boxes{Shape{0, 4}};
  std::vector<uint8_t> crowd;
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

}  // namespace detkit::model
