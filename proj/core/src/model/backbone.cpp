#include "detkit/model/backbone.hpp"

#include <algorithm>

namespace detkit::model {

using namespace detkit::ops;

BasicBlock::BasicBlock(int64_t in, int64_t out, int stride) {
  conv1_ = register_module("conv1", std::make_shared<nn::Conv2d>(in, out, 3, stride, 1, false));
  bn1_ = register_module("bn1", std::make_shared<nn::BatchNorm2d>(out));
  conv2_ = register_module("conv2", std::make_shared<nn::Conv2d>(out, out, 3, 1, 1, false));
  bn2_ = register_module("bn2", std::make_shared<nn::BatchNorm2d>(out));
  if (in != out || stride != 1) {
    down_ = register_module("downsample", std::make_shared<nn::Conv2d>(in, out, 1, stride, 0, false));
    down_bn_ = register_module("downsample_bn", std::make_shared<nn::BatchNorm2d>(out));
  }
}

Var BasicBlock::forward(const Var& x) {
  Var h = relu(bn1_->forward(conv1_->forward(x)));
  h = bn2_->forward(conv2_->forward(h));
  Var shortcut = down_ ? down_bn_->forward(down_->forward(x)) : x;
  return relu(add(h, shortcut));
}

ResNetBackbone::Stem::Stem(int64_t channels) {
  conv = register_module("conv", std::make_shared<nn::Conv2d>(3, channels, 3, 2, 1, false));
  bn = register_module("bn", std::make_shared<nn::BatchNorm2d>(channels));
}

namespace {

const std::vector<std::string> kStageNames = {"res2", "res3", "res4", "res5"};

}  // namespace

ResNetBackbone::ResNetBackbone(int64_t stem_channels, std::vector<int64_t> stage_channels,
                               std::vector<std::string> out_features, int blocks_per_stage)
    : channels_(std::move(stage_channels)) {
  if (channels_.size() != 4) throw BadDim("ResNetBackbone expects 4 stage widths (res2..res5)");
  if (blocks_per_stage < 1) throw BadDim("ResNetBackbone needs at least one block per stage");
  if (out_features.empty()) throw BadDim("ResNetBackbone: out_features is empty");
  stem_ = register_module("stem", std::make_shared<Stem>(stem_channels));
  int64_t in = stem_channels;
  for (size_t s = 0; s < 4; ++s) {
    auto stage = std::make_shared<Stage>();
    for (int b = 0; b < blocks_per_stage; ++b)
      stage->add_block(std::make_shared<BasicBlock>(b == 0 ? in : channels_[s], channels_[s], b == 0 ? 2 : 1));
    in = channels_[s];
    stages_.push_back(register_module(kStageNames[s], stage));
  }
  for (const auto& f : out_features) {
    auto it = std::find(kStageNames.begin(), kStageNames.end(), f);
    if (it == kStageNames.end()) throw BadDim("ResNetBackbone: unknown out feature '" + f + "'");
    out_index_.push_back(static_cast<int>(it - kStageNames.begin()));
  }
  if (!std::is_sorted(out_index_.begin(), out_index_.end()) ||
      std::adjacent_find(out_index_.begin(), out_index_.end()) != out_index_.end())
    throw BadDim("ResNetBackbone: out_features must be distinct and in stage order");
}

FeaturePyramid ResNetBackbone::forward(const Var& image, const Mask& mask) {
  const int64_t H = image.dim(1), W = image.dim(2);
  Var x = relu(stem_->bn->forward(stem_->conv->forward(image)));
  FeaturePyramid fp;
  size_t next = 0;
  for (size_t s = 0; s < stages_.size() && next < out_index_.size(); ++s) {
    for (auto& block : stages_[s]->blocks) x = block->forward(x);
    if (static_cast<int>(s) == out_index_[next]) {
      FeatureLevel lv;
      lv.map = x;
      lv.stride = 4 << s;
      lv.padding = resize_mask(mask, H, W, x.dim(1), x.dim(2));
      fp.levels.push_back(std::move(lv));
      ++next;
    }
  }
  return fp;
}

std::vector<int64_t> ResNetBackbone::out_channels() const {
  std::vector<int64_t> out;
  for (int i : out_index_) out.push_back(channels_[static_cast<size_t>(i)]);
  return out;
}

std::vector<int> ResNetBackbone::out_strides() const {
  std::vector<int> out;
  for (int i : out_index_) out.push_back(4 << i);
  return out;
}

std::vector<std::pair<std::string, nn::Module*>> ResNetBackbone::stages() {
  std::vector<std::pair<std::string, nn::Module*>> out{{"stem", stem_.get()}};
  for (size_t s = 0; s < stages_.size(); ++s) out.emplace_back(kStageNames[s], stages_[s].get());
  return out;
}

PatchTransformerBackbone::PatchTransformerBackbone(int patch, int64_t dim, int depth, int heads, int num_levels)
    : patch_(patch), dim_(dim), num_levels_(num_levels) {
  if (patch < 1 || num_levels < 1 || depth < 0) throw BadDim("PatchTransformerBackbone: bad geometry");
  patch_embed_ = register_module("patch_embed", std::make_shared<nn::Conv2d>(3, dim, patch, patch, 0, true));
  for (int i = 0; i < depth; ++i)
    blocks_.push_back(register_module("blocks." + std::to_string(i),
                                      std::make_shared<TransformerEncoderLayer>(dim, heads, dim * 2)));
}

FeaturePyramid PatchTransformerBackbone::forward(const Var& image, const Mask& mask) {
  const int64_t H = image.dim(1), W = image.dim(2);
  Var x = patch_embed_->forward(image);
  const int64_t h = x.dim(1), w = x.dim(2);
  Mask m = resize_mask(mask, H, W, h, w);
  const Var pos(sinusoidal_position_embedding(m, h, w, dim_));
  Var tokens = chw_to_tokens(x);
  for (const auto& b : blocks_) tokens = b->forward(tokens, pos, &m);
  Var map = tokens_to_chw(tokens, h, w);
  FeaturePyramid fp;
  for (int l = 0; l < num_levels_; ++l) {
    if (l > 0) {
      if (map.dim(1) < 2 || map.dim(2) < 2) throw ShapeMismatch("PatchTransformerBackbone: input too small for pyramid");
      map = avg_pool2(map);
    }
    FeatureLevel lv;
    lv.map = map;
    lv.stride = patch_ << l;
    lv.padding = resize_mask(mask, H, W, map.dim(1), map.dim(2));
    fp.levels.push_back(std::move(lv));
  }
  return fp;
}

std::vector<int64_t> PatchTransformerBackbone::out_channels() const {
  return std::vector<int64_t>(static_cast<size_t>(num_levels_), dim_);
}

std::vector<int> PatchTransformerBackbone::out_strides() const {
  std::vector<int> out;
  for (int l = 0; l < num_levels_; ++l) out.push_back(patch_ << l);
  return out;
}

std::vector<std::pair<std::string, nn::Module*>> PatchTransformerBackbone::stages() {
  std::vector<std::pair<std::string, nn::Module*>> out{{"patch_embed", patch_embed_.get()}};
  for (size_t i = 0; i < blocks_.size(); ++i) out.emplace_back("blocks." + std::to_string(i), blocks_[i].get());
  return out;
}

}  // namespace detkit::model
