#pragma once

#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "detkit/criterion.hpp"
#include "detkit/geometry.hpp"
#include "detkit/model/backbone.hpp"
#include "detkit/model/decoder.hpp"
#include "detkit/model/encoder.hpp"
#include "detkit/model/query.hpp"

namespace detkit::model {

struct DetectorOptions {
  int64_t num_classes = 80;
  int64_t dim = 256;
  int num_feature_levels = 1;
};

enum class Mode { kTrain, kEval };

// The six-slot assembly: Backbone -> projection -> Encoder -> Query
// initialization (+ denoising groups in training) -> Decoder, with the
// matcher and loss held by the criterion.
class Detector : public nn::Module {
 public:
  Detector(std::shared_ptr<Backbone> backbone, std::shared_ptr<Encoder> encoder,
           std::shared_ptr<QueryInit> query_init, std::shared_ptr<Decoder> decoder,
           std::shared_ptr<criterion::SetCriterion> criterion, DetectorOptions opts, DenoisingOptions dn = {});

  // One image [3 x H x W] with its padding mask. `targets` and `rng` are
  // needed only for denoising in training mode.
  DetectionOutput forward_image(const Var& image, const Mask& mask, Mode mode, const Targets* targets = nullptr,
                                std::mt19937_64* rng = nullptr);

  Backbone& backbone() { return *backbone_; }
  Encoder& encoder() { return *encoder_; }
  QueryInit& query_init() { return *query_init_; }
  Decoder& decoder() { return *decoder_; }
  const criterion::SetCriterion* criterion() const { return criterion_.get(); }
  const DetectorOptions& options() const { return opts_; }
  const DenoisingOptions& denoising() const { return dn_opts_; }
  int64_t num_queries() const { return query_init_->num_queries(); }

 private:
  FeaturePyramid project(const FeaturePyramid& raw, const Mask& mask, int64_t H, int64_t W) const;

  std::shared_ptr<Backbone> backbone_;
  std::shared_ptr<Encoder> encoder_;
  std::shared_ptr<QueryInit> query_init_;
  std::shared_ptr<Decoder> decoder_;
  std::shared_ptr<criterion::SetCriterion> criterion_;
  DetectorOptions opts_;
  DenoisingOptions dn_opts_;
  std::vector<std::shared_ptr<nn::Linear>> input_proj_;
  std::vector<std::shared_ptr<nn::Conv2d>> extra_levels_;
  std::shared_ptr<nn::Embedding> level_embed_;
  std::vector<std::shared_ptr<nn::Linear>> class_heads_;
  std::shared_ptr<DenoisingGenerator> dn_;
};

// Batched forward: images [B x 3 x H x W], one mask per image.
std::vector<DetectionOutput> forward_detector(Detector& model, const Tensor& images, const std::vector<Mask>& masks,
                                              Mode mode, const std::vector<Targets>* targets = nullptr,
                                              std::mt19937_64* rng = nullptr);

struct Detections {
  Tensor boxes{Shape{0, 4}};  // xyxy absolute
  std::vector<double> scores;
  std::vector<int64_t> labels;
  int64_t size() const { return static_cast<int64_t>(scores.size()); }
};

struct PostprocessOptions {
  int64_t top_k = 100;
  bool use_nms = false;
  double nms_threshold = 0.8;
  bool per_class_nms = false;
};

Detections postprocess(const DetectionOutput& output, const geometry::ImageSize& size,
                       const PostprocessOptions& opts);

}  // namespace detkit::model
