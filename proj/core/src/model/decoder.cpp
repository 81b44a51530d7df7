#include "detkit/model/decoder.hpp"

#include <numbers>

namespace detkit::model {

using namespace detkit::ops;
using CA = DecoderOptions::CrossAttention;

DecoderLayer::DecoderLayer(const DecoderOptions& o) : kind_(o.cross_attention) {
  self_attn_ = register_module("self_attn", std::make_shared<MultiheadAttention>(o.dim, o.heads));
  switch (o.cross_attention) {
    case CA::kDense:
      dense_cross_ = register_module("cross_attn", std::make_shared<MultiheadAttention>(o.dim, o.heads));
      break;
    case CA::kConditional:
      cond_cross_ = register_module("cross_attn", std::make_shared<ConditionalCrossAttention>(o.dim, o.heads));
      break;
    case CA::kDeformable:
      deform_cross_ = register_module("cross_attn",
                                      std::make_shared<DeformableAttention>(o.dim, o.heads, o.levels, o.points));
      break;
  }
  ffn_ = register_module("ffn", std::make_shared<FeedForward>(o.dim, o.ffn_dim));
  norm1_ = register_module("norm1", std::make_shared<nn::LayerNorm>(o.dim));
  norm2_ = register_module("norm2", std::make_shared<nn::LayerNorm>(o.dim));
  norm3_ = register_module("norm3", std::make_shared<nn::LayerNorm>(o.dim));
}

Var DecoderLayer::forward(const Var& tgt, const Var& query_pos, const Var& spatial, const Var& reference,
                          const Mask* self_mask, const FlatMemory& memory, const Var& encoded) const {
  const Var qk = add_opt(tgt, query_pos);
  AttentionMasks sm;
  sm.attn_mask = self_mask;
  Var h = norm1_->forward(add(tgt, self_attn_->forward(qk, qk, tgt, sm)));

  Var cross;
  switch (kind_) {
    case CA::kDense: {
      AttentionMasks cm;
      cm.key_padding = &memory.padding;
      cross = dense_cross_->forward(add_opt(h, query_pos), add_opt(encoded, memory.pos), encoded, cm);
      break;
    }
    case CA::kConditional:
      cross = cond_cross_->forward(h, spatial, encoded, memory.pos, &memory.padding);
      break;
    case CA::kDeformable:
      cross = deform_cross_->forward(add_opt(h, query_pos), reference, encoded, memory.shapes, &memory.padding);
      break;
  }
  h = norm2_->forward(add(h, cross));
  return norm3_->forward(add(h, ffn_->forward(h)));
}

TransformerDecoder::TransformerDecoder(DecoderOptions o) : opts_(o) {
  if (o.num_layers < 1) throw BadDim("decoder needs at least one layer");
  if (o.dim % 4 != 0) throw BadDim("decoder dim must be divisible by 4");
  for (int l = 0; l < o.num_layers; ++l)
    layers_.push_back(register_module("layers." + std::to_string(l), std::make_shared<DecoderLayer>(o)));
  const int heads = o.box_refine ? o.num_layers : 1;
  for (int l = 0; l < heads; ++l) {
    auto head = register_module("bbox_embed." + std::to_string(l), std::make_shared<nn::MLP>(o.dim, o.dim, 4, 3));
    // Start at the anchors when predictions are deltas on top of them.
    if (needs_anchors()) {
      head->last().weight().mutable_value().fill(0.0);
      head->last().bias().mutable_value().fill(0.0);
    }
    box_heads_.push_back(head);
  }
  if (o.query_pos == DecoderOptions::QueryPos::kAnchor)
    anchor_embed_ = register_module("ref_point_head", std::make_shared<AnchorQueryEmbedding>(o.dim));
  if (o.cross_attention == CA::kConditional)
    query_scale_ = register_module("query_scale", std::make_shared<nn::MLP>(o.dim, o.dim, o.dim, 2));
  norm_ = register_module("norm", std::make_shared<nn::LayerNorm>(o.dim));
}

bool TransformerDecoder::needs_anchors() const {
  return opts_.query_pos == DecoderOptions::QueryPos::kAnchor || opts_.cross_attention != CA::kDense;
}

DecoderOutput TransformerDecoder::forward(const QuerySet& queries, const FlatMemory& memory, const Var& encoded) {
  if (needs_anchors() && !queries.has_anchors())
    throw SlotError("decoder needs anchor boxes but the query initializer provides none");
  const bool learned_pos = opts_.query_pos == DecoderOptions::QueryPos::kLearned;
  if (learned_pos && queries.position.numel() == 0)
    throw SlotError("decoder expects learned positional queries");
  if (opts_.cross_attention == CA::kDeformable && static_cast<int>(memory.shapes.size()) != opts_.levels)
    throw ShapeMismatch("deformable decoder built for " + std::to_string(opts_.levels) + " levels, got " +
                        std::to_string(memory.shapes.size()));
  const int64_t Q = queries.total();
  const Mask* self_mask = queries.self_attn_mask.empty() ? nullptr : &queries.self_attn_mask;

  Tensor ratio_rows;
  if (opts_.cross_attention == CA::kDeformable) {
    ratio_rows = Tensor({Q, 4 * opts_.levels});
    for (int64_t q = 0; q < Q; ++q)
      for (int l = 0; l < opts_.levels; ++l)
        for (int k = 0; k < 4; ++k) ratio_rows.at(q, l * 4 + k) = memory.valid_ratios[static_cast<size_t>(l)][k % 2];
  }

  DecoderOutput out;
  Var tgt = queries.content;
  Var ref = queries.anchors;
  for (int l = 0; l < opts_.num_layers; ++l) {
    Var pos = learned_pos ? queries.position : anchor_embed_->forward(ref);
    Var spatial, reference;
    if (opts_.cross_attention == CA::kConditional) {
      Var sine = sine_embed(slice_cols(ref, 0, 2), static_cast<int>(opts_.dim / 2), 10000.0, 2.0 * std::numbers::pi);
      spatial = mul(sine, query_scale_->forward(tgt));
    } else if (opts_.cross_attention == CA::kDeformable) {
      std::vector<Var> parts(static_cast<size_t>(opts_.levels), ref);
      reference = mul(opts_.levels == 1 ? ref : concat_cols(parts), Var(ratio_rows));
    }
    tgt = layers_[static_cast<size_t>(l)]->forward(tgt, pos, spatial, reference, self_mask, memory, encoded);
    Var h = norm_->forward(tgt);
    const auto& head = box_heads_[opts_.box_refine ? static_cast<size_t>(l) : 0];
    Var box = ref.numel() > 0 ? iterative_box_refine(ref, head->forward(h)) : sigmoid(head->forward(h));
    out.hidden.push_back(h);
    out.boxes.push_back(box);
    if (opts_.box_refine && ref.numel() > 0) ref = box.detach();
  }
  return out;
}

}  // namespace detkit::model
