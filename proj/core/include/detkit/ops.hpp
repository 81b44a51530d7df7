#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "detkit/autograd.hpp"

// Differentiable tensor ops. Matrices are row-major [rows x cols]; feature
// maps are [C x H x W] for a single image.
namespace detkit::ops {

// Elementwise, operands of identical shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a[N x D] + b[D] broadcast over rows.
Var add_rowwise(const Var& a, const Var& b);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
// log(x / (1 - x)) on x clamped to [0,1], each side floored at eps.
Var inverse_sigmoid(const Var& a, double eps = 1e-3);

Var matmul(const Var& a, const Var& b);
// x[N x I] W[O x I]^T + b[O]; bias may be an empty Var.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

Var slice_cols(const Var& a, int64_t start, int64_t len);
Var slice_rows(const Var& a, int64_t start, int64_t len);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& a, const std::vector<int64_t>& index);
// Rows of `a` selected by `index` are multiplied by zero where mask is set.
Var zero_rows(const Var& a, const std::vector<uint8_t>& mask);

Var sum(const Var& a);
Var mean(const Var& a);

Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// x[C x H x W], weight[O x C x k x k], bias[O] (may be empty).
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
// Batch statistics over H x W when `training`; running buffers are updated in
// place with `momentum`. In inference mode the running buffers are used.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
                 bool training, double momentum = 0.1, double eps = 1e-5);
// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
Var avg_pool2(const Var& x);
// [C x H x W] -> [H*W x C] and back.
Var chw_to_tokens(const Var& x);
Var tokens_to_chw(const Var& tokens, int64_t height, int64_t width);

struct AttentionMasks {
  // [Lq x Lk], nonzero = blocked. Empty when unused.
  const std::vector<uint8_t>* attn_mask = nullptr;
  // [Lk], nonzero = padded key. Empty when unused.
  const std::vector<uint8_t>* key_padding = nullptr;
};

// Scaled dot-product attention over `heads` heads. q,k: [L x heads*dk],
// v: [Lk x heads*dv]. Rows whose keys are all blocked produce zeros.
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, AttentionMasks masks = {});

struct LevelShape {
  int64_t height = 0;
  int64_t width = 0;
};

// Multi-scale deformable sampling core. value: [sum(H_l*W_l) x heads*dh],
// locations: [Q x heads*levels*points*2] normalized (x,y) in [0,1],
// weights: [Q x heads*levels*points]. Bilinear sampling with zero padding at
// pixel coordinate (x*W - 0.5, y*H - 0.5).
Var deformable_sample(const Var& value, const std::vector<LevelShape>& shapes, const Var& locations,
                      const Var& weights, int heads, int points);

// Sampling locations for deformable attention. reference: [Q x levels*R]
// with R = 2 (x, y) or R = 4 (cx, cy, w, h); offsets: [Q x heads*levels*points*2].
// R = 2: loc = ref + offset / (W_l, H_l); R = 4: loc = ref_xy + offset / points * ref_wh / 2.
Var sampling_locations(const Var& reference, const Var& offsets, const std::vector<LevelShape>& shapes, int heads,
                       int points, int ref_dim);

// Sinusoidal embedding of each coordinate of coords[N x K]: for each column,
// num_feats channels interleaving sin/cos of (x * scale) / temperature^(2*(i/2)/num_feats).
// Output [N x K*num_feats], columns ordered as given (callers reorder).
Var sine_embed(const Var& coords, int num_feats, double temperature, double scale);

// Sigmoid focal loss summed over all elements. targets is a {0,1} tensor of
// logits' shape. alpha disabled when nullopt.
Var sigmoid_focal_loss(const Var& logits, const Tensor& targets, std::optional<double> alpha, double gamma);
// Sum over rows of |pred - target|_1.
Var l1_loss(const Var& pred, const Tensor& target);
// Sum over rows of (1 - GIoU) for cxcywh boxes.
Var giou_loss(const Var& pred_cxcywh, const Tensor& target_cxcywh);

}  // namespace detkit::ops
