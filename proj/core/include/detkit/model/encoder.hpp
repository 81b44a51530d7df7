#pragma once

#include <memory>
#include <vector>

#include "detkit/model/layers.hpp"

namespace detkit::model {

// Post-norm transformer layer with dense self-attention; q = k = x + pos.
class TransformerEncoderLayer : public nn::Module {
 public:
  TransformerEncoderLayer(int64_t dim, int heads, int64_t ffn_dim);
  Var forward(const Var& x, const Var& pos, const Mask* key_padding) const;

 private:
  std::shared_ptr<MultiheadAttention> attn_;
  std::shared_ptr<FeedForward> ffn_;
  std::shared_ptr<nn::LayerNorm> norm1_, norm2_;
};

class DeformableEncoderLayer : public nn::Module {
 public:
  DeformableEncoderLayer(int64_t dim, int heads, int64_t ffn_dim, int levels, int points);
  Var forward(const Var& x, const Var& pos, const Var& reference, const FlatMemory& m) const;

 private:
  std::shared_ptr<DeformableAttention> attn_;
  std::shared_ptr<FeedForward> ffn_;
  std::shared_ptr<nn::LayerNorm> norm1_, norm2_;
};

// Encoder slot: refines flattened tokens; returns [L x D].
class Encoder : public nn::Module {
 public:
  virtual Var forward(const FlatMemory& memory) = 0;
};

class TransformerEncoder : public Encoder {
 public:
  TransformerEncoder(int num_layers, int64_t dim, int heads, int64_t ffn_dim);
  Var forward(const FlatMemory& memory) override;

 private:
  std::vector<std::shared_ptr<TransformerEncoderLayer>> layers_;
};

class DeformableEncoder : public Encoder {
 public:
  DeformableEncoder(int num_layers, int64_t dim, int heads, int64_t ffn_dim, int levels, int points);
  Var forward(const FlatMemory& memory) override;

 private:
  int levels_;
  std::vector<std::shared_ptr<DeformableEncoderLayer>> layers_;
};

// Per-token reference points for the deformable encoder: each token's
// normalized center within the valid region, rescaled to every level.
// Returns [L x levels*2].
Tensor encoder_reference_points(const FlatMemory& m);

}  // namespace detkit::model
