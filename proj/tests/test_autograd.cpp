#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "detkit/model/layers.hpp"
#include "detkit/ops.hpp"
#include "support/oracles.hpp"

using namespace detkit;
using oracle::check_gradients;

namespace {

Tensor rnd(Shape s, uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform(std::move(s), rng, lo, hi);
}

// Weighted sum so every output element contributes a distinct gradient.
Var probe(const Var& y, uint64_t seed = 99) {
  Tensor w = rnd(y.shape(), seed);
  return ops::sum(ops::mul(y, Var(w)));
}

}  // namespace

TEST(Grad, Elementwise) {
  auto r = check_gradients(
      [](const std::vector<Var>& v) {
        Var y = ops::add(ops::mul(ops::sigmoid(v[0]), ops::tanh(v[1])), ops::exp(ops::scale(v[0], 0.3)));
        return probe(ops::sub(y, ops::add_scalar(v[1], 2.0)));
      },
      {rnd({3, 4}, 1), rnd({3, 4}, 2)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Grad, InverseSigmoidInterior) {
  auto r = check_gradients([](const std::vector<Var>& v) { return probe(ops::inverse_sigmoid(v[0])); },
                           {rnd({2, 5}, 3, 0.05, 0.95)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Grad, LinearMatmulSoftmaxLayerNorm) {
  auto r = check_gradients(
      [](const std::vector<Var>& v) {
        Var h = ops::linear(v[0], v[1], v[2]);
        h = ops::layer_norm(h, v[3], v[4]);
        h = ops::softmax_rows(h);
        return probe(ops::matmul(ops::transpose(h), v[0]));
      },
      {rnd({4, 5}, 4), rnd({6, 5}, 5), rnd({6}, 6), rnd({6}, 7, 0.5, 1.5), rnd({6}, 8)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Grad, SliceConcatGather) {
  auto r = check_gradients(
      [](const std::vector<Var>& v) {
        Var a = ops::slice_cols(v[0], 1, 3);
        Var b = ops::slice_rows(v[0], 0, 2);
        Var c = ops::concat_rows({ops::gather_rows(a, {2, 0, 2}), ops::zero_rows(a, {0, 1, 0, 0})});
        return ops::add(probe(c, 3), probe(ops::concat_cols({b, b}), 4));
      },
      {rnd({4, 5}, 9)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Grad, ConvBatchNormPool) {
  Tensor rm(Shape{3}), rv(Shape{3}, 1.0);
  auto r = check_gradients(
      [&](const std::vector<Var>& v) {
        Tensor m = rm, var = rv;
        Var y = ops::conv2d(v[0], v[1], v[2], 2, 1);
        y = ops::batch_norm2d(y, v[3], v[4], m, var, true);
        y = ops::avg_pool2(ops::relu(y));
        return probe(ops::chw_to_tokens(y));
      },
      {rnd({2, 6, 6}, 10), rnd({3, 2, 3, 3}, 11), rnd({3}, 12), rnd({3}, 13, 0.5, 1.5), rnd({3}, 14)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Grad, MultiheadAttentionWithMasks) {
  std::vector<uint8_t> attn = {0, 1, 0, 0, 0, 0, 1, 0, 0};
  std::vector<uint8_t> pad = {0, 0, 1};
  auto r = check_gradients(
      [&](const std::vector<Var>& v) {
        return probe(ops::multihead_attention(v[0], v[1], v[2], 2, {&attn, &pad}));
      },
      {rnd({3, 4}, 15), rnd({3, 4}, 16), rnd({3, 6}, 17)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Grad, SineEmbed) {
  auto r = check_gradients([](const std::vector<Var>& v) { return probe(ops::sine_embed(v[0], 8, 20.0, 6.28)); },
                           {rnd({3, 4}, 18, 0.1, 0.9)});
  EXPECT_TRUE(r.ok) << r.worst_rel;
}

TEST(Forward, InverseSigmoidRefinementAlgebra) {
  Tensor prev = rnd({5, 4}, 19, 0.05, 0.95);
  Tensor d1 = rnd({5, 4}, 20), d2 = rnd({5, 4}, 21);
  Var same = model::iterative_box_refine(Var(prev), Var(Tensor(Shape{5, 4})));
  EXPECT_LT(max_abs_diff(same.value(), prev), 1e-6);
  Var twice = model::iterative_box_refine(model::iterative_box_refine(Var(prev), Var(d1)), Var(d2));
  Tensor sum = d1;
  sum.add_(d2);
  Var once = model::iterative_box_refine(Var(prev), Var(sum));
  EXPECT_LT(max_abs_diff(twice.value(), once.value()), 1e-9);
  Var half = model::iterative_box_refine(Var(Tensor(Shape{1, 4}, 0.5)), Var(Tensor(Shape{1, 4}, 0.7)));
  EXPECT_NEAR(half.value()[0], 1.0 / (1.0 + std::exp(-0.7)), 1e-12);
}

TEST(Tape, NoGradBuildsConstants) {
  Var x(rnd({2, 2}, 22), true);
  {
    NoGradGuard g;
    EXPECT_FALSE(ops::mul(x, x).requires_grad());
  }
  EXPECT_TRUE(ops::mul(x, x).requires_grad());
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  Var x(Tensor::from({1}, {3.0}), true);
  Var y = ops::sum(ops::add(ops::mul(x, x), x));
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}
