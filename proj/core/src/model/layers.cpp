#include "detkit/model/layers.hpp"

#include <cmath>
#include <numbers>

namespace detkit::model {

using namespace detkit::ops;

Var add_opt(const Var& a, const Var& b) { return b.numel() > 0 ? add(a, b) : a; }

Var softmax_groups(const Var& x, int64_t group) {
  const int64_t rows = x.dim(0), cols = x.dim(1);
  if (group <= 0 || cols % group != 0) throw ShapeMismatch("softmax_groups: bad group size");
  return reshape(softmax_rows(reshape(x, {rows * cols / group, group})), {rows, cols});
}

Mask resize_mask(const Mask& mask, int64_t h, int64_t w, int64_t out_h, int64_t out_w) {
  Mask out(static_cast<size_t>(out_h * out_w));
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy = std::min(h - 1, y * h / out_h);
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t sx = std::min(w - 1, x * w / out_w);
      out[static_cast<size_t>(y * out_w + x)] = mask[static_cast<size_t>(sy * w + sx)];
    }
  }
  return out;
}

void FeaturePyramid::validate(bool same_channels) const {
  for (size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    if (l.map.shape().size() != 3) throw ShapeMismatch("pyramid level " + std::to_string(i) + " is not CxHxW");
    if (static_cast<int64_t>(l.padding.size()) != l.height() * l.width())
      throw ShapeMismatch("pyramid level " + std::to_string(i) + " mask size mismatch");
    if (i > 0 && l.stride <= levels[i - 1].stride) throw ShapeMismatch("pyramid strides must increase strictly");
    if (same_channels && l.channels() != levels[0].channels())
      throw ShapeMismatch("pyramid levels disagree on channel count");
  }
}

Tensor sinusoidal_position_embedding(const Mask& mask, int64_t height, int64_t width, int64_t dim,
                                     double temperature, double scale) {
  if (dim <= 0 || dim % 4 != 0) throw BadDim("position embedding dim " + std::to_string(dim) + " not divisible by 4");
  if (static_cast<int64_t>(mask.size()) != height * width) throw ShapeMismatch("position embedding: mask size");
  const int64_t nf = dim / 2;
  std::vector<double> ycum(static_cast<size_t>(height * width)), xcum(ycum.size());
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const size_t i = static_cast<size_t>(y * width + x);
      const double valid = mask[i] ? 0.0 : 1.0;
      ycum[i] = valid + (y > 0 ? ycum[i - static_cast<size_t>(width)] : 0.0);
      xcum[i] = valid + (x > 0 ? xcum[i - 1] : 0.0);
    }
  constexpr double kEps = 1e-6;
  std::vector<double> inv_freq(static_cast<size_t>(nf));
  for (int64_t i = 0; i < nf; ++i)
    inv_freq[static_cast<size_t>(i)] = 1.0 / std::pow(temperature, 2.0 * static_cast<double>(i / 2) / nf);
  Tensor out({height * width, dim});
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const size_t i = static_cast<size_t>(y * width + x);
      const double ylast = ycum[static_cast<size_t>((height - 1) * width + x)];
      const double xlast = xcum[static_cast<size_t>(y * width + width - 1)];
      const double cy = ycum[i] / (ylast + kEps) * scale;
      const double cx = xcum[i] / (xlast + kEps) * scale;
      double* row = out.data() + static_cast<int64_t>(i) * dim;
      for (int64_t k = 0; k < nf; ++k) {
        const double fy = cy * inv_freq[static_cast<size_t>(k)];
        const double fx = cx * inv_freq[static_cast<size_t>(k)];
        row[k] = k % 2 == 0 ? std::sin(fy) : std::cos(fy);
        row[nf + k] = k % 2 == 0 ? std::sin(fx) : std::cos(fx);
      }
    }
  return out;
}

FlatMemory flatten_pyramid(const FeaturePyramid& fp, int64_t dim, double temperature) {
  fp.validate(true);
  FlatMemory m;
  std::vector<Var> tokens;
  std::vector<Var> pos;
  int64_t start = 0;
  for (size_t l = 0; l < fp.levels.size(); ++l) {
    const auto& lv = fp.levels[l];
    if (lv.channels() != dim)
      throw ShapeMismatch("flatten_pyramid: level channels " + std::to_string(lv.channels()) + " != " +
                          std::to_string(dim));
    const int64_t h = lv.height(), w = lv.width();
    tokens.push_back(chw_to_tokens(lv.map));
    pos.push_back(Var(sinusoidal_position_embedding(lv.padding, h, w, dim, temperature)));
    m.shapes.push_back({h, w});
    m.level_start.push_back(start);
    start += h * w;
    m.level_index.insert(m.level_index.end(), static_cast<size_t>(h * w), static_cast<int64_t>(l));
    m.padding.insert(m.padding.end(), lv.padding.begin(), lv.padding.end());
    int64_t valid_h = 0, valid_w = 0;
    for (int64_t y = 0; y < h; ++y) valid_h += lv.padding[static_cast<size_t>(y * w)] ? 0 : 1;
    for (int64_t x = 0; x < w; ++x) valid_w += lv.padding[static_cast<size_t>(x)] ? 0 : 1;
    m.valid_ratios.push_back({static_cast<double>(valid_w) / static_cast<double>(w),
                              static_cast<double>(valid_h) / static_cast<double>(h)});
  }
  m.tokens = tokens.size() == 1 ? tokens[0] : concat_rows(tokens);
  m.pos = pos.size() == 1 ? pos[0] : concat_rows(pos);
  return m;
}

Var anchor_sine_embedding(const Var& anchors, int64_t dim, double temperature) {
  if (dim <= 0 || dim % 4 != 0) throw BadDim("anchor embedding dim " + std::to_string(dim) + " not divisible by 4");
  if (anchors.shape().size() != 2 || anchors.dim(1) != 4) throw ShapeMismatch("anchors must be [Q x 4]");
  return sine_embed(anchors, static_cast<int>(dim / 2), temperature, 2.0 * std::numbers::pi);
}

Var iterative_box_refine(const Var& prev_boxes, const Var& deltas, double eps) {
  return sigmoid(add(inverse_sigmoid(prev_boxes, eps), deltas));
}

AnchorQueryEmbedding::AnchorQueryEmbedding(int64_t dim, double temperature) : dim_(dim), temperature_(temperature) {
  if (dim <= 0 || dim % 4 != 0) throw BadDim("anchor embedding dim " + std::to_string(dim) + " not divisible by 4");
  proj_ = register_module("proj", std::make_shared<nn::MLP>(2 * dim, dim, dim, 2));
}

Var AnchorQueryEmbedding::forward(const Var& anchors) const {
  return proj_->forward(anchor_sine_embedding(anchors, dim_, temperature_));
}

MultiheadAttention::MultiheadAttention(int64_t dim, int heads) : heads_(heads) {
  if (heads <= 0 || dim % heads != 0) throw BadDim("attention dim not divisible by heads");
  using I = nn::Linear::Init;
  wq_ = register_module("q_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  wk_ = register_module("k_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  wv_ = register_module("v_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  wo_ = register_module("out_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
}

Var MultiheadAttention::forward(const Var& q, const Var& k, const Var& v, AttentionMasks masks) const {
  return wo_->forward(multihead_attention(wq_->forward(q), wk_->forward(k), wv_->forward(v), heads_, masks));
}

namespace {

// Per head h: [a_h, b_h].
Var interleave_heads(const Var& a, const Var& b, int heads) {
  const int64_t dh = a.dim(1) / heads;
  std::vector<Var> parts;
  for (int h = 0; h < heads; ++h) {
    parts.push_back(slice_cols(a, h * dh, dh));
    parts.push_back(slice_cols(b, h * dh, dh));
  }
  return concat_cols(parts);
}

}  // namespace

ConditionalCrossAttention::ConditionalCrossAttention(int64_t dim, int heads) : heads_(heads) {
  if (heads <= 0 || dim % heads != 0) throw BadDim("attention dim not divisible by heads");
  using I = nn::Linear::Init;
  q_content_ = register_module("q_content", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  q_pos_ = register_module("q_pos", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  k_content_ = register_module("k_content", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  k_pos_ = register_module("k_pos", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  v_ = register_module("v_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  out_ = register_module("out_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
}

Var ConditionalCrossAttention::forward(const Var& tgt, const Var& query_pos, const Var& memory,
                                       const Var& memory_pos, const Mask* key_padding) const {
  Var q = interleave_heads(q_content_->forward(tgt), q_pos_->forward(query_pos), heads_);
  Var k = interleave_heads(k_content_->forward(memory), k_pos_->forward(memory_pos), heads_);
  AttentionMasks masks;
  masks.key_padding = key_padding;
  return out_->forward(multihead_attention(q, k, v_->forward(memory), heads_, masks));
}

DeformableAttention::DeformableAttention(int64_t dim, int heads, int levels, int points)
    : dim_(dim), heads_(heads), levels_(levels), points_(points) {
  if (heads <= 0 || dim % heads != 0) throw BadDim("deformable attention dim not divisible by heads");
  if (levels <= 0 || points <= 0) throw BadDim("deformable attention needs levels, points > 0");
  using I = nn::Linear::Init;
  const int64_t lp = static_cast<int64_t>(heads) * levels * points;
  offsets_ = register_module("sampling_offsets", std::make_shared<nn::Linear>(dim, lp * 2, true, I::kZero));
  // Offsets start on a ring of directions, one per head, growing with the point index.
  auto& bias = offsets_->bias().mutable_value();
  for (int h = 0; h < heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * h / heads;
    double gx = std::cos(theta), gy = std::sin(theta);
    const double norm = std::max(std::abs(gx), std::abs(gy));
    gx /= norm;
    gy /= norm;
    for (int l = 0; l < levels; ++l)
      for (int p = 0; p < points; ++p) {
        const int64_t idx = ((static_cast<int64_t>(h) * levels + l) * points + p) * 2;
        bias[idx] = gx * (p + 1);
        bias[idx + 1] = gy * (p + 1);
      }
  }
  offsets_->tag_untagged(nn::ParamTag::kOffsetsRefPoints);
  weights_ = register_module("attention_weights", std::make_shared<nn::Linear>(dim, lp, true, I::kZero));
  value_proj_ = register_module("value_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
  output_proj_ = register_module("output_proj", std::make_shared<nn::Linear>(dim, dim, true, I::kXavier));
}

Var DeformableAttention::normalized_weights(const Var& query) const {
  return softmax_groups(weights_->forward(query), static_cast<int64_t>(levels_) * points_);
}

Var DeformableAttention::forward(const Var& query, const Var& reference, const Var& value,
                                 const std::vector<LevelShape>& shapes, const Mask* value_padding) const {
  if (static_cast<int>(shapes.size()) != levels_)
    throw ShapeMismatch("deformable attention: " + std::to_string(shapes.size()) + " value levels, expected " +
                        std::to_string(levels_));
  if (query.dim(1) != dim_ || value.dim(1) != dim_) throw ShapeMismatch("deformable attention: feature dim");
  const int64_t per_level = reference.dim(1) / levels_;
  if (reference.dim(0) != query.dim(0) || reference.dim(1) % levels_ != 0 || (per_level != 2 && per_level != 4))
    throw ShapeMismatch("deformable attention: reference " + shape_str(reference.shape()));
  Var v = value_proj_->forward(value);
  if (value_padding) v = zero_rows(v, *value_padding);
  Var loc = sampling_locations(reference, offsets_->forward(query), shapes, heads_, points_,
                               static_cast<int>(per_level));
  Var out = deformable_sample(v, shapes, loc, normalized_weights(query), heads_, points_);
  return output_proj_->forward(out);
}

FeedForward::FeedForward(int64_t dim, int64_t hidden) {
  fc1_ = register_module("fc1", std::make_shared<nn::Linear>(dim, hidden));
  fc2_ = register_module("fc2", std::make_shared<nn::Linear>(hidden, dim));
}

Var FeedForward::forward(const Var& x) const { return fc2_->forward(relu(fc1_->forward(x))); }

}  // namespace detkit::model
