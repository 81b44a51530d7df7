#include "detkit/model/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace detkit::model {

using namespace detkit::ops;

namespace {

template <typename F>
auto in_slot(const char* slot, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const SlotError&) {
    throw;
  } catch (const std::exception& e) {
    throw SlotError(std::string(slot) + ": " + e.what());
  }
}

}  // namespace

Detector::Detector(std::shared_ptr<Backbone> backbone, std::shared_ptr<Encoder> encoder,
                   std::shared_ptr<QueryInit> query_init, std::shared_ptr<Decoder> decoder,
                   std::shared_ptr<criterion::SetCriterion> criterion, DetectorOptions opts, DenoisingOptions dn)
    : criterion_(std::move(criterion)), opts_(opts), dn_opts_(dn) {
  if (!backbone || !encoder || !query_init || !decoder) throw SlotError("detector: every slot must be filled");
  if (opts.num_classes < 1) throw BadDim("detector: num_classes must be positive");
  backbone_ = register_module("backbone", std::move(backbone));
  encoder_ = register_module("encoder", std::move(encoder));
  query_init_ = register_module("query_init", std::move(query_init));
  decoder_ = register_module("decoder", std::move(decoder));

  const auto channels = backbone_->out_channels();
  const int raw_levels = static_cast<int>(channels.size());
  if (opts.num_feature_levels < raw_levels)
    throw BadDim("detector: num_feature_levels " + std::to_string(opts.num_feature_levels) + " < backbone levels " +
                 std::to_string(raw_levels));
  if (opts.num_feature_levels > 4) throw BadDim("detector: at most 4 feature levels are supported");
  for (int l = 0; l < raw_levels; ++l)
    input_proj_.push_back(register_module("input_proj." + std::to_string(l),
                                          std::make_shared<nn::Linear>(channels[static_cast<size_t>(l)], opts.dim,
                                                                       true, nn::Linear::Init::kXavier)));
  for (int l = raw_levels; l < opts.num_feature_levels; ++l) {
    const int64_t in = l == raw_levels ? channels.back() : opts.dim;
    extra_levels_.push_back(register_module("input_proj." + std::to_string(l),
                                            std::make_shared<nn::Conv2d>(in, opts.dim, 3, 2, 1, true)));
  }
  if (opts.num_feature_levels > 1)
    level_embed_ = register_module("level_embed", std::make_shared<nn::Embedding>(opts.num_feature_levels, opts.dim));

  const int heads = decoder_->refines_boxes() ? decoder_->num_layers() : 1;
  for (int l = 0; l < heads; ++l) {
    auto head = register_module("class_embed." + std::to_string(l), std::make_shared<nn::Linear>(opts.dim, opts.num_classes));
    head->bias().mutable_value().fill(-std::log((1.0 - 0.01) / 0.01));
    class_heads_.push_back(head);
  }
  if (dn.num_groups > 0) {
    if (!decoder_->needs_anchors() || !query_init_->provides_anchors())
      throw SlotError("denoising requires anchor queries and an anchor-aware decoder");
    dn_ = register_module("dn", std::make_shared<DenoisingGenerator>(opts.num_classes, opts.dim, dn));
  }
  if (decoder_->needs_anchors() && !query_init_->provides_anchors())
    throw SlotError("decoder needs anchors but the query initializer provides none");

  backbone_->tag_untagged(nn::ParamTag::kBackbone);
  tag_untagged(nn::ParamTag::kOther);
}

FeaturePyramid Detector::project(const FeaturePyramid& raw, const Mask& mask, int64_t H, int64_t W) const {
  if (raw.levels.size() != input_proj_.size())
    throw SlotError("backbone: produced " + std::to_string(raw.levels.size()) + " levels, declared " +
                    std::to_string(input_proj_.size()));
  FeaturePyramid out;
  for (size_t l = 0; l < raw.levels.size(); ++l) {
    const auto& lv = raw.levels[l];
    FeatureLevel p;
    p.map = tokens_to_chw(input_proj_[l]->forward(chw_to_tokens(lv.map)), lv.height(), lv.width());
    p.stride = lv.stride;
    p.padding = lv.padding;
    out.levels.push_back(std::move(p));
  }
  Var src = raw.levels.back().map;
  int stride = raw.levels.back().stride;
  for (const auto& conv : extra_levels_) {
    src = conv->forward(src);
    stride *= 2;
    FeatureLevel p;
    p.map = src;
    p.stride = stride;
    p.padding = resize_mask(mask, H, W, src.dim(1), src.dim(2));
    out.levels.push_back(std::move(p));
  }
  return out;
}

DetectionOutput Detector::forward_image(const Var& image, const Mask& mask, Mode mode, const Targets* targets,
                                        std::mt19937_64* rng) {
  const int64_t H = image.dim(1), W = image.dim(2);
  const FeaturePyramid raw = in_slot("backbone", [&] { return backbone_->forward(image, mask); });
  FlatMemory mem = in_slot("projection", [&] {
    FlatMemory m = flatten_pyramid(project(raw, mask, H, W), opts_.dim);
    if (level_embed_) m.pos = add(m.pos, level_embed_->rows(m.level_index));
    return m;
  });
  const Var encoded = in_slot("encoder", [&] { return encoder_->forward(mem); });
  QueryInitOutput qi = in_slot("query_init", [&] { return query_init_->forward(mem, encoded); });
  QuerySet queries = std::move(qi.queries);
  if (mode == Mode::kTrain && dn_ && targets && targets->size() > 0) {
    if (!rng) throw SlotError("denoising: training forward needs an rng");
    queries = in_slot("denoising", [&] { return dn_->extend(queries, *targets, *rng); });
  }
  const DecoderOutput dec = in_slot("decoder", [&] { return decoder_->forward(queries, mem, encoded); });

  DetectionOutput out;
  const int64_t n_dn = queries.dn ? queries.dn->total() : 0;
  const int64_t n_match = queries.num_matching;
  for (size_t l = 0; l < dec.hidden.size(); ++l) {
    const auto& head = class_heads_[class_heads_.size() == 1 ? 0 : l];
    Var logits = head->forward(dec.hidden[l]);
    if (n_dn > 0) {
      out.dn_per_layer.push_back({slice_rows(logits, 0, n_dn), slice_rows(dec.boxes[l], 0, n_dn)});
      out.per_layer.push_back({slice_rows(logits, n_dn, n_match), slice_rows(dec.boxes[l], n_dn, n_match)});
    } else {
      out.per_layer.push_back({logits, dec.boxes[l]});
    }
  }
  out.encoder_proposals = std::move(qi.proposals);
  out.dn = queries.dn;
  return out;
}

std::vector<DetectionOutput> forward_detector(Detector& model, const Tensor& images, const std::vector<Mask>& masks,
                                              Mode mode, const std::vector<Targets>* targets, std::mt19937_64* rng) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeMismatch("forward_detector: images must be [B x 3 x H x W]");
  const int64_t B = images.dim(0), H = images.dim(2), W = images.dim(3);
  if (static_cast<int64_t>(masks.size()) != B) throw ShapeMismatch("forward_detector: one mask per image");
  if (targets && static_cast<int64_t>(targets->size()) != B)
    throw ShapeMismatch("forward_detector: one target set per image");
  std::vector<DetectionOutput> outs;
  const int64_t per = 3 * H * W;
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> px(images.data() + b * per, images.data() + (b + 1) * per);
    Var img(Tensor({3, H, W}, std::move(px)));
    outs.push_back(model.forward_image(img, masks[static_cast<size_t>(b)], mode,
                                       targets ? &(*targets)[static_cast<size_t>(b)] : nullptr, rng));
  }
  return outs;
}

Detections postprocess(const DetectionOutput& output, const geometry::ImageSize& size,
                       const PostprocessOptions& opts) {
  if (output.per_layer.empty()) throw BadTopK("postprocess: output has no decoder layers");
  const auto& last = output.per_layer.back();
  const int64_t Q = last.logits.dim(0), C = last.logits.dim(1);
  if (opts.top_k < 1 || opts.top_k > Q * C)
    throw BadTopK("postprocess: top_k " + std::to_string(opts.top_k) + " not in [1, " + std::to_string(Q * C) + "]");
  std::vector<double> prob(static_cast<size_t>(Q * C));
  for (int64_t i = 0; i < Q * C; ++i) prob[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-last.logits.value()[i]));
  std::vector<int64_t> order(prob.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return prob[static_cast<size_t>(a)] > prob[static_cast<size_t>(b)]; });
  order.resize(static_cast<size_t>(opts.top_k));

  Tensor boxes({opts.top_k, 4});
  std::vector<double> scores;
  std::vector<int64_t> labels;
  const Tensor xyxy = geometry::cxcywh_to_xyxy(last.boxes.value());
  for (int64_t k = 0; k < opts.top_k; ++k) {
    const int64_t flat = order[static_cast<size_t>(k)];
    const int64_t q = flat / C;
    scores.push_back(prob[static_cast<size_t>(flat)]);
    labels.push_back(flat % C);
    const double scale[4] = {size.width, size.height, size.width, size.height};
    for (int c = 0; c < 4; ++c) boxes.at(k, c) = std::clamp(xyxy.at(q, c), 0.0, 1.0) * scale[c];
  }
  Detections det;
  if (!opts.use_nms) {
    det.boxes = std::move(boxes);
    det.scores = std::move(scores);
    det.labels = std::move(labels);
    return det;
  }
  const geometry::BoxArray arr(boxes, geometry::BoxFormat::kXyxyAbs, size);
  const auto keep = opts.per_class_nms ? geometry::batched_nms(arr, scores, labels, opts.nms_threshold)
                                       : geometry::nms(arr, scores, opts.nms_threshold);
  det.boxes = Tensor({static_cast<int64_t>(keep.size()), 4});
  for (size_t i = 0; i < keep.size(); ++i) {
    for (int c = 0; c < 4; ++c) det.boxes.at(static_cast<int64_t>(i), c) = boxes.at(keep[i], c);
    det.scores.push_back(scores[static_cast<size_t>(keep[i])]);
    det.labels.push_back(labels[static_cast<size_t>(keep[i])]);
  }
  return det;
}

}  // namespace detkit::model
