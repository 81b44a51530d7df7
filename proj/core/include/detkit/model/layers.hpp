#pragma once

#include <memory>
#include <string>
#include <vector>

#include "detkit/model/types.hpp"
#include "detkit/nn.hpp"

// Embeddings and attention building blocks shared by encoders and decoders.
namespace detkit::model {

// [H*W x D] sine embedding of a padding mask: cumulative coordinates over
// the unpadded region, normalized to (0, scale]; y channels first, then x.
// D must be divisible by 4.
Tensor sinusoidal_position_embedding(const Mask& mask, int64_t height, int64_t width, int64_t dim,
                                     double temperature = 10000.0, double scale = 2.0 * 3.14159265358979323846);

// Serializes a projected pyramid; positions include nothing level-specific.
FlatMemory flatten_pyramid(const FeaturePyramid& fp, int64_t dim, double temperature = 10000.0);

// Sine embedding of anchors (cx, cy, w, h): [Q x 4 * (dim/2)] before projection.
Var anchor_sine_embedding(const Var& anchors, int64_t dim, double temperature = 10000.0);

// sigmoid(inverse_sigmoid(prev) + deltas).
Var iterative_box_refine(const Var& prev_boxes, const Var& deltas, double eps = 1e-3);

// Anchor -> positional query: MLP(4 * D/2 -> D -> D) over the sine embedding.
class AnchorQueryEmbedding : public nn::Module {
 public:
  explicit AnchorQueryEmbedding(int64_t dim, double temperature = 10000.0);
  Var forward(const Var& anchors) const;
  int64_t dim() const { return dim_; }

 private:
  int64_t dim_;
  double temperature_;
  std::shared_ptr<nn::MLP> proj_;
};

class MultiheadAttention : public nn::Module {
 public:
  MultiheadAttention(int64_t dim, int heads);
  Var forward(const Var& q, const Var& k, const Var& v, ops::AttentionMasks masks = {}) const;

 private:
  int heads_;
  std::shared_ptr<nn::Linear> wq_, wk_, wv_, wo_;
};

// Cross attention with content and spatial parts concatenated per head, the
// decoupled query of the conditional decoder.
class ConditionalCrossAttention : public nn::Module {
 public:
  ConditionalCrossAttention(int64_t dim, int heads);
  // query_pos: spatial query [Q x D]; memory_pos: [L x D].
  Var forward(const Var& tgt, const Var& query_pos, const Var& memory, const Var& memory_pos,
              const Mask* key_padding) const;

 private:
  int heads_;
  std::shared_ptr<nn::Linear> q_content_, q_pos_, k_content_, k_pos_, v_, out_;
};

class DeformableAttention : public nn::Module {
 public:
  DeformableAttention(int64_t dim, int heads, int levels, int points);
  // reference: [Q x levels*2] or [Q x levels*4]; value: [L x D] with
  // `shapes` describing the level layout. Padded value rows are zeroed.
  Var forward(const Var& query, const Var& reference, const Var& value, const std::vector<ops::LevelShape>& shapes,
              const Mask* value_padding) const;

  nn::Linear& sampling_offsets() { return *offsets_; }
  nn::Linear& attention_weights() { return *weights_; }
  nn::Linear& value_proj() { return *value_proj_; }
  nn::Linear& output_proj() { return *output_proj_; }
  int heads() const { return heads_; }
  int levels() const { return levels_; }
  int points() const { return points_; }

  // Attention weights after the per-(query, head) softmax: [Q x heads*levels*points].
  Var normalized_weights(const Var& query) const;

 private:
  int64_t dim_;
  int heads_, levels_, points_;
  std::shared_ptr<nn::Linear> offsets_, weights_, value_proj_, output_proj_;
};

class FeedForward : public nn::Module {
 public:
  FeedForward(int64_t dim, int64_t hidden);
  Var forward(const Var& x) const;

 private:
  std::shared_ptr<nn::Linear> fc1_, fc2_;
};

// Helpers shared by modules.
Var add_opt(const Var& a, const Var& b);  // a + b, or a when b is empty
Var softmax_groups(const Var& x, int64_t group);  // softmax over consecutive column groups

}  // namespace detkit::model
