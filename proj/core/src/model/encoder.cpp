#include "detkit/model/encoder.hpp"

namespace detkit::model {

using namespace detkit::ops;

TransformerEncoderLayer::TransformerEncoderLayer(int64_t dim, int heads, int64_t ffn_dim) {
  attn_ = register_module("self_attn", std::make_shared<MultiheadAttention>(dim, heads));
  ffn_ = register_module("ffn", std::make_shared<FeedForward>(dim, ffn_dim));
  norm1_ = register_module("norm1", std::make_shared<nn::LayerNorm>(dim));
  norm2_ = register_module("norm2", std::make_shared<nn::LayerNorm>(dim));
}

Var TransformerEncoderLayer::forward(const Var& x, const Var& pos, const Mask* key_padding) const {
  const Var qk = add_opt(x, pos);
  AttentionMasks masks;
  masks.key_padding = key_padding;
  Var h = norm1_->forward(add(x, attn_->forward(qk, qk, x, masks)));
  return norm2_->forward(add(h, ffn_->forward(h)));
}

DeformableEncoderLayer::DeformableEncoderLayer(int64_t dim, int heads, int64_t ffn_dim, int levels, int points) {
  attn_ = register_module("self_attn", std::make_shared<DeformableAttention>(dim, heads, levels, points));
  ffn_ = register_module("ffn", std::make_shared<FeedForward>(dim, ffn_dim));
  norm1_ = register_module("norm1", std::make_shared<nn::LayerNorm>(dim));
  norm2_ = register_module("norm2", std::make_shared<nn::LayerNorm>(dim));
}

Var DeformableEncoderLayer::forward(const Var& x, const Var& pos, const Var& reference, const FlatMemory& m) const {
  Var h = norm1_->forward(add(x, attn_->forward(add_opt(x, pos), reference, x, m.shapes, &m.padding)));
  return norm2_->forward(add(h, ffn_->forward(h)));
}

TransformerEncoder::TransformerEncoder(int num_layers, int64_t dim, int heads, int64_t ffn_dim) {
  for (int i = 0; i < num_layers; ++i)
    layers_.push_back(register_module("layers." + std::to_string(i),
                                      std::make_shared<TransformerEncoderLayer>(dim, heads, ffn_dim)));
}

Var TransformerEncoder::forward(const FlatMemory& memory) {
  Var x = memory.tokens;
  for (const auto& layer : layers_) x = layer->forward(x, memory.pos, &memory.padding);
  return x;
}

Tensor encoder_reference_points(const FlatMemory& m) {
  const auto levels = static_cast<int64_t>(m.shapes.size());
  Tensor ref({m.size(), levels * 2});
  for (int64_t l = 0; l < levels; ++l) {
    const auto [h, w] = m.shapes[static_cast<size_t>(l)];
    const auto [vx, vy] = m.valid_ratios[static_cast<size_t>(l)];
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t t = m.level_start[static_cast<size_t>(l)] + y * w + x;
        const double rx = (static_cast<double>(x) + 0.5) / (std::max(vx, 1e-6) * static_cast<double>(w));
        const double ry = (static_cast<double>(y) + 0.5) / (std::max(vy, 1e-6) * static_cast<double>(h));
        for (int64_t k = 0; k < levels; ++k) {
          ref.at(t, k * 2) = rx * m.valid_ratios[static_cast<size_t>(k)][0];
          ref.at(t, k * 2 + 1) = ry * m.valid_ratios[static_cast<size_t>(k)][1];
        }
      }
  }
  return ref;
}

DeformableEncoder::DeformableEncoder(int num_layers, int64_t dim, int heads, int64_t ffn_dim, int levels,
                                     int points)
    : levels_(levels) {
  for (int i = 0; i < num_layers; ++i)
    layers_.push_back(register_module(
        "layers." + std::to_string(i), std::make_shared<DeformableEncoderLayer>(dim, heads, ffn_dim, levels, points)));
}

Var DeformableEncoder::forward(const FlatMemory& memory) {
  if (static_cast<int>(memory.shapes.size()) != levels_)
    throw ShapeMismatch("deformable encoder built for " + std::to_string(levels_) + " levels, got " +
                        std::to_string(memory.shapes.size()));
  const Var ref(encoder_reference_points(memory));
  Var x = memory.tokens;
  for (const auto& layer : layers_) x = layer->forward(x, memory.pos, ref, memory);
  return x;
}

}  // namespace detkit::model
