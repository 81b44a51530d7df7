#pragma once

#include <memory>
#include <random>

#include "detkit/data.hpp"
#include "detkit/model/detector.hpp"
#include "detkit/nn.hpp"

// Small detectors assembled directly in C++, so the core tests never depend
// on anything under projects/.
namespace toy {

struct Spec {
  int64_t dim = 32;
  int64_t classes = 3;
  int64_t queries = 8;
  bool anchors = true;        // DAB-style anchor queries + conditional decoder
  bool deformable = false;    // deformable encoder + decoder over 2 levels
  bool two_stage = false;
  bool patch_backbone = false;
  int dn_groups = 0;
  bool contrastive = false;
  uint64_t seed = 0;
};

inline std::shared_ptr<detkit::model::Detector> detector(const Spec& s) {
  using namespace detkit::model;
  detkit::nn::seed_init_rng(s.seed);
  const int levels = s.deformable ? 2 : 1;
  std::shared_ptr<Backbone> bb;
  if (s.patch_backbone)
    bb = std::make_shared<PatchTransformerBackbone>(8, s.dim, 1, 2, levels);
  else
    bb = std::make_shared<ResNetBackbone>(8, std::vector<int64_t>{8, 16, 16, 32},
                                          s.deformable ? std::vector<std::string>{"res4", "res5"}
                                                       : std::vector<std::string>{"res4"},
                                          1);
  std::shared_ptr<Encoder> enc;
  if (s.deformable)
    enc = std::make_shared<DeformableEncoder>(1, s.dim, 2, 2 * s.dim, levels, 2);
  else
    enc = std::make_shared<TransformerEncoder>(1, s.dim, 2, 2 * s.dim);
  std::shared_ptr<QueryInit> qi;
  if (s.two_stage)
    qi = std::make_shared<TwoStageQueries>(s.queries, s.dim, s.classes, TwoStageQueries::Content::kLearned);
  else
    qi = std::make_shared<LearnedQueries>(s.queries, s.dim,
                                          s.anchors ? LearnedQueries::Mode::kAnchor : LearnedQueries::Mode::kPosition,
                                          false);
  DecoderOptions o;
  o.num_layers = 2;
  o.dim = s.dim;
  o.heads = 2;
  o.ffn_dim = 2 * s.dim;
  if (s.deformable) {
    o.cross_attention = DecoderOptions::CrossAttention::kDeformable;
    o.query_pos = DecoderOptions::QueryPos::kAnchor;
    o.levels = levels;
    o.points = 2;
    o.box_refine = true;
  } else if (s.anchors || s.two_stage) {
    o.cross_attention = DecoderOptions::CrossAttention::kConditional;
    o.query_pos = DecoderOptions::QueryPos::kAnchor;
  }
  auto dec = std::make_shared<TransformerDecoder>(o);
  auto crit = std::make_shared<detkit::criterion::SetCriterion>(s.classes, detkit::criterion::LossWeights{});
  DetectorOptions d{s.classes, s.dim, levels};
  DenoisingOptions dn;
  dn.num_groups = s.dn_groups;
  dn.contrastive = s.contrastive;
  return std::make_shared<Detector>(bb, enc, qi, dec, crit, d, dn);
}

inline std::shared_ptr<const detkit::data::Dataset> shapes(int n = 4, int size = 64, uint64_t seed = 0) {
  detkit::data::ShapesOptions o;
  o.seed = seed;
  o.num_images = n;
  o.image_size = size;
  return std::make_shared<const detkit::data::Dataset>(detkit::data::generate_shapes_dataset(o));
}

inline detkit::data::AugmentOptions fixed_size(int64_t side) {
  detkit::data::AugmentOptions a;
  a.short_sizes = {side};
  a.max_size = side;
  a.crop_prob = 0.0;
  a.test_short_size = side;
  return a;
}

}  // namespace toy
