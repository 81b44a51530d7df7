#pragma once

#include <memory>
#include <string>
#include <vector>

#include "detkit/config.hpp"
#include "detkit/data.hpp"
#include "detkit/engine.hpp"
#include "detkit/evalbench.hpp"
#include "detkit/model/detector.hpp"

// Glue from a config tree to runnable objects. Expected top-level names:
//
//   model       L("detkit.Detector")(...)
//   dataloader  dict(train=dict(dataset=..., batch_size=..., augment=dict(...)),
//                    test=dict(dataset=..., augment=dict(...)))
//   train       dict(max_iter=..., lr_milestones=[...], ...)
//   postprocess dict(top_k=..., use_nms=..., nms_threshold=...)   (optional)
namespace detkit::experiment {

engine::TrainConfig train_config_from(const config::Value& node);
data::AugmentOptions augment_from(const config::Value* node, bool train);
model::PostprocessOptions postprocess_from(const config::Value* node);

// Seeds the parameter-init stream with train.seed, then instantiates `model`.
std::shared_ptr<model::Detector> build_model(const config::ConfigTree& cfg);

struct Split {
  std::shared_ptr<const data::Dataset> dataset;
  data::AugmentOptions augment;
  int64_t batch_size = 1;
  bool shuffle = true;
  int64_t size_divisibility = 32;
};
Split split_from(const config::ConfigTree& cfg, const std::string& name);

struct Experiment {
  config::ConfigTree cfg;
  engine::TrainConfig train;
  std::shared_ptr<model::Detector> model;
  Split train_split;
  std::shared_ptr<const data::DataLoader> train_loader;
  model::PostprocessOptions postprocess;
};
Experiment build_experiment(const config::ConfigTree& cfg);

struct EvalResult {
  evalbench::ApMetrics metrics;
  std::vector<evalbench::ImageDetections> predictions;  // original image coordinates
};
// Eval-mode inference over `dataset` at the test transform; boxes are mapped
// back to each image's original resolution before scoring.
EvalResult evaluate(model::Detector& model, const data::Dataset& dataset, const data::AugmentOptions& test_augment,
                    const model::PostprocessOptions& post);

}  // namespace detkit::experiment
