#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "detkit/model/encoder.hpp"
#include "detkit/model/types.hpp"
#include "detkit/nn.hpp"

namespace detkit::model {

// Backbone slot: one image [3 x H x W] plus its padding mask in, a pyramid of
// raw (unprojected) feature maps out.
class Backbone : public nn::Module {
 public:
  virtual FeaturePyramid forward(const Var& image, const Mask& mask) = 0;
  virtual std::vector<int64_t> out_channels() const = 0;
  virtual std::vector<int> out_strides() const = 0;
  // Ordered freeze units, stem first.
  virtual std::vector<std::pair<std::string, nn::Module*>> stages() = 0;
};

class BasicBlock : public nn::Module {
 public:
  BasicBlock(int64_t in, int64_t out, int stride);
  Var forward(const Var& x);

 private:
  std::shared_ptr<nn::Conv2d> conv1_, conv2_, down_;
  std::shared_ptr<nn::BatchNorm2d> bn1_, bn2_, down_bn_;
};

// Residual CNN: stem (3x3 stride-2 conv, BN, ReLU) then res2..res5, each a
// stack of basic blocks whose first block halves the resolution.
class ResNetBackbone : public Backbone {
 public:
  ResNetBackbone(int64_t stem_channels, std::vector<int64_t> stage_channels, std::vector<std::string> out_features,
                 int blocks_per_stage = 1);
  FeaturePyramid forward(const Var& image, const Mask& mask) override;
  std::vector<int64_t> out_channels() const override;
  std::vector<int> out_strides() const override;
  std::vector<std::pair<std::string, nn::Module*>> stages() override;

 private:
  struct Stem : nn::Module {
    explicit Stem(int64_t channels);
    std::shared_ptr<nn::Conv2d> conv;
    std::shared_ptr<nn::BatchNorm2d> bn;
  };
  struct Stage : nn::Module {
    void add_block(std::shared_ptr<BasicBlock> b) {
      blocks.push_back(register_module(std::to_string(blocks.size()), std::move(b)));
    }
    std::vector<std::shared_ptr<BasicBlock>> blocks;
  };
  std::shared_ptr<Stem> stem_;
  std::vector<std::shared_ptr<Stage>> stages_;
  std::vector<int64_t> channels_;
  std::vector<int> out_index_;  // into stages_ (0 = res2)
};

// Patchify transformer: non-overlapping patch embedding, a few dense
// encoder layers, then a pyramid built by repeated 2x2 average pooling.
class PatchTransformerBackbone : public Backbone {
 public:
  PatchTransformerBackbone(int patch, int64_t dim, int depth, int heads, int num_levels);
  FeaturePyramid forward(const Var& image, const Mask& mask) override;
  std::vector<int64_t> out_channels() const override;
  std::vector<int> out_strides() const override;
  std::vector<std::pair<std::string, nn::Module*>> stages() override;

 private:
  int patch_;
  int64_t dim_;
  int num_levels_;
  std::shared_ptr<nn::Conv2d> patch_embed_;
  std::vector<std::shared_ptr<TransformerEncoderLayer>> blocks_;
};

}  // namespace detkit::model
