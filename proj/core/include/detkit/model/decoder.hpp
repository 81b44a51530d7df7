#pragma once

#include <memory>
#include <string>
#include <vector>

#include "detkit/model/layers.hpp"

namespace detkit::model {

struct DecoderOutput {
  std::vector<Var> hidden;  // per layer [Q x D]
  std::vector<Var> boxes;   // per layer [Q x 4], in [0,1]
};

// Decoder slot: refines queries against the encoder memory, predicting a box
// per query at every layer.
class Decoder : public nn::Module {
 public:
  virtual DecoderOutput forward(const QuerySet& queries, const FlatMemory& memory, const Var& encoded) = 0;
  virtual int num_layers() const = 0;
  virtual bool needs_anchors() const = 0;
  // Per-layer prediction heads (layer-wise box refinement).
  virtual bool refines_boxes() const { return false; }
};

struct DecoderOptions {
  enum class CrossAttention { kDense, kConditional, kDeformable };
  enum class QueryPos { kLearned, kAnchor };
  int num_layers = 6;
  int64_t dim = 256;
  int heads = 8;
  int64_t ffn_dim = 1024;
  CrossAttention cross_attention = CrossAttention::kDense;
  QueryPos query_pos = QueryPos::kLearned;
  int levels = 1;
  int points = 4;
  bool box_refine = false;
  // Reserved; refinement always detaches the previous layer's boxes.
  bool look_forward_twice = false;
};

class DecoderLayer : public nn::Module {
 public:
  explicit DecoderLayer(const DecoderOptions& o);
  // query_pos: positional query for self-attention and dense/deformable
  // cross-attention; spatial: conditional spatial query; reference:
  // [Q x levels*4] for deformable cross-attention.
  Var forward(const Var& tgt, const Var& query_pos, const Var& spatial, const Var& reference, const Mask* self_mask,
              const FlatMemory& memory, const Var& encoded) const;

 private:
  DecoderOptions::CrossAttention kind_;
  std::shared_ptr<MultiheadAttention> self_attn_;
  std::shared_ptr<MultiheadAttention> dense_cross_;
  std::shared_ptr<ConditionalCrossAttention> cond_cross_;
  std::shared_ptr<DeformableAttention> deform_cross_;
  std::shared_ptr<FeedForward> ffn_;
  std::shared_ptr<nn::LayerNorm> norm1_, norm2_, norm3_;
};

class TransformerDecoder : public Decoder {
 public:
  explicit TransformerDecoder(DecoderOptions o);
  DecoderOutput forward(const QuerySet& queries, const FlatMemory& memory, const Var& encoded) override;
  int num_layers() const override { return opts_.num_layers; }
  bool needs_anchors() const override;
  bool refines_boxes() const override { return opts_.box_refine; }
  const DecoderOptions& options() const { return opts_; }

 private:
  DecoderOptions opts_;
  std::vector<std::shared_ptr<DecoderLayer>> layers_;
  std::vector<std::shared_ptr<nn::MLP>> box_heads_;  // one, or one per layer with refinement
  std::shared_ptr<AnchorQueryEmbedding> anchor_embed_;
  std::shared_ptr<nn::MLP> query_scale_;
  std::shared_ptr<nn::LayerNorm> norm_;
};

}  // namespace detkit::model
