#include "detkit/experiment.hpp"

#include <algorithm>

#include "detkit/instantiate.hpp"

namespace detkit::experiment {

using config::Kwargs;
using config::Value;

namespace {

Kwargs kwargs_of(const Value* node, const std::string& path) {
  if (!node || node->is_none()) return Kwargs(path, {});
  if (node->kind() != Value::Kind::kDict) throw config::ConstructorError(path + ": expected a dict");
  return Kwargs(path, node->as_dict());
}

}  // namespace

engine::TrainConfig train_config_from(const Value& node) {
  Kwargs k = kwargs_of(&node, "train");
  engine::TrainConfig c;
  c.max_iter = k.get_int("max_iter", c.max_iter);
  c.lr_milestones = k.get_ints("lr_milestones", c.lr_milestones);
  c.lr_gamma = k.get_double("lr_gamma", c.lr_gamma);
  c.warmup_iters = k.get_int("warmup_iters", c.warmup_iters);
  c.backbone_lr = k.get_double("backbone_lr", c.backbone_lr);
  c.offsets_refpoints_lr = k.get_double("offsets_refpoints_lr", c.offsets_refpoints_lr);
  c.encdec_lr = k.get_double("encdec_lr", c.encdec_lr);
  c.weight_decay = k.get_double("weight_decay", c.weight_decay);
  c.beta1 = k.get_double("beta1", c.beta1);
  c.beta2 = k.get_double("beta2", c.beta2);
  c.eps = k.get_double("eps", c.eps);
  c.batch_size = k.get_int("batch_size", c.batch_size);
  c.freeze_stages = static_cast<int>(k.get_int("freeze_stages", c.freeze_stages));
  // None disables EMA / clipping; an absent key keeps the default.
  if (k.has("ema_decay")) c.ema_decay = k.get_double("ema_decay");
  else if (node.child("ema_decay")) {
    c.ema_decay.reset();
    k.raw("ema_decay");
  }
  if (k.has("clip_norm")) c.clip_norm = k.get_double("clip_norm");
  else if (node.child("clip_norm")) {
    c.clip_norm.reset();
    k.raw("clip_norm");
  }
  c.amp = k.get_bool("amp", c.amp);
  c.grad_checkpoint = k.get_bool("grad_checkpoint", c.grad_checkpoint);
  c.seed = static_cast<uint64_t>(k.get_int("seed", static_cast<int64_t>(c.seed)));
  c.log_period = k.get_int("log_period", c.log_period);
  c.checkpoint_period = k.get_int("checkpoint_period", c.checkpoint_period);
  k.finish();
  c.validate();
  return c;
}

data::AugmentOptions augment_from(const Value* node, bool train) {
  Kwargs k = kwargs_of(node, "augment");
  data::AugmentOptions a;
  a.train = train;
  a.short_sizes = k.get_ints("short_sizes", a.short_sizes);
  a.max_size = k.get_int("max_size", a.max_size);
  a.crop_prob = k.get_double("crop_prob", a.crop_prob);
  a.min_crop_fraction = k.get_double("min_crop_fraction", a.min_crop_fraction);
  a.test_short_size = k.get_int("test_short_size", a.test_short_size);
  k.finish();
  return a;
}

model::PostprocessOptions postprocess_from(const Value* node) {
  Kwargs k = kwargs_of(node, "postprocess");
  model::PostprocessOptions p;
  p.top_k = k.get_int("top_k", p.top_k);
  p.use_nms = k.get_bool("use_nms", p.use_nms);
  p.nms_threshold = k.get_double("nms_threshold", p.nms_threshold);
  p.per_class_nms = k.get_bool("per_class_nms", p.per_class_nms);
  k.finish();
  return p;
}

std::shared_ptr<model::Detector> build_model(const config::ConfigTree& cfg) {
  const Value* train = cfg.find("train");
  const Value* seed = train ? train->child("seed") : nullptr;
  nn::seed_init_rng(seed && !seed->is_none() ? static_cast<uint64_t>(seed->as_int()) : 0);
  return config::instantiate_as<model::Detector>(cfg.at("model"), "model");
}

Split split_from(const config::ConfigTree& cfg, const std::string& name) {
  const std::string path = "dataloader." + name;
  const Value* node = cfg.find(path);
  if (!node) {
    if (name == "train") throw config::BadKeyPath("config has no 'dataloader.train'");
    node = &cfg.at("dataloader.train");  // evaluate on the training images
  }
  Kwargs k = kwargs_of(node, path);
  Split s;
  s.dataset = config::instantiate_as<const data::Dataset>(k.raw("dataset"), path + ".dataset");
  s.augment = augment_from(node->child("augment"), name == "train");
  if (node->child("augment")) k.raw("augment");
  s.batch_size = k.get_int("batch_size", s.batch_size);
  s.shuffle = k.get_bool("shuffle", s.shuffle);
  s.size_divisibility = k.get_int("size_divisibility", s.size_divisibility);
  k.finish();
  return s;
}

Experiment build_experiment(const config::ConfigTree& cfg) {
  Experiment e;
  e.cfg = cfg;
  e.train = train_config_from(cfg.at("train"));
  e.model = build_model(cfg);
  e.train_split = split_from(cfg, "train");
  e.train.batch_size = e.train_split.batch_size;
  e.train_loader = std::make_shared<data::DataLoader>(e.train_split.dataset, e.train_split.batch_size,
                                                      e.train_split.augment, e.train.seed, e.train_split.shuffle,
                                                      e.train_split.size_divisibility);
  e.postprocess = postprocess_from(cfg.find("postprocess"));
  return e;
}

EvalResult evaluate(model::Detector& model, const data::Dataset& dataset, const data::AugmentOptions& test_augment,
                    const model::PostprocessOptions& post) {
  data::AugmentOptions aug = test_augment;
  aug.train = false;
  const bool was_training = model.training();
  model.train(false);
  EvalResult res;
  std::vector<evalbench::ImageGroundTruth> gts;
  {
    NoGradGuard no_grad;
    std::mt19937_64 unused(0);
    for (const auto& s : dataset.samples) {
      const data::Sample in = data::apply_augment(s, aug, unused);
      const data::Batch b = data::collate_batch({in}, 1);
      const auto outs = model::forward_detector(model, b.images, b.masks, model::Mode::kEval);
      // Small toy heads may have fewer than top_k (query, class) pairs.
      model::PostprocessOptions p = post;
      p.top_k = std::min(p.top_k, outs[0].per_layer.back().logits.numel());
      model::Detections det = model::postprocess(outs[0], b.sizes[0], p);
      const double sx = static_cast<double>(s.width()) / static_cast<double>(in.width());
      const double sy = static_cast<double>(s.height()) / static_cast<double>(in.height());
      for (int64_t i = 0; i < det.size(); ++i) {
        det.boxes.at(i, 0) *= sx;
        det.boxes.at(i, 2) *= sx;
        det.boxes.at(i, 1) *= sy;
        det.boxes.at(i, 3) *= sy;
      }
      res.predictions.push_back(evalbench::detections_of(s.image_id, det));
      gts.push_back(evalbench::ground_truth_of(s));
    }
  }
  model.train(was_training);
  res.metrics = evalbench::coco_ap_evaluate(res.predictions, gts, dataset.num_classes());
  return res;
}

}  // namespace detkit::experiment
