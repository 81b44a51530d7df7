#include "detkit/criterion.hpp"
#include "detkit/data.hpp"
#include "detkit/geometry.hpp"
#include "detkit/instantiate.hpp"
#include "detkit/model/detector.hpp"

namespace detkit::config::detail {

namespace {

using namespace detkit::model;

template <typename E>
E pick(Kwargs& k, const std::string& name, const std::string& fallback,
       std::initializer_list<std::pair<const char*, E>> options) {
  const std::string v = k.get_string(name, fallback);
  std::string allowed;
  for (const auto& [key, value] : options) {
    if (v == key) return value;
    allowed += allowed.empty() ? key : std::string(", ") + key;
  }
  throw ConstructorError(k.path() + "." + name + ": '" + v + "' is not one of " + allowed);
}

int to_int(int64_t v) { return static_cast<int>(v); }

}  // namespace

void register_builtin_targets(Catalog& c) {
  c.add("detkit.geometry.BoxConverter", [](Kwargs& k) {
    auto conv = std::make_shared<geometry::BoxConverter>(geometry::parse_box_format(k.get_string("format")));
    k.finish();
    return make_object<geometry::BoxConverter>(conv);
  });

  // Backbone slot
  c.add("detkit.ResNetBackbone", [](Kwargs& k) {
    auto m = std::make_shared<ResNetBackbone>(k.get_int("stem_channels", 16),
                                              k.get_ints("stage_channels", {16, 32, 64, 128}),
                                              k.get_strings("out_features", {"res5"}),
                                              to_int(k.get_int("blocks_per_stage", 1)));
    k.finish();
    return make_object<Backbone>(m);
  });
  c.add("detkit.PatchTransformerBackbone", [](Kwargs& k) {
    auto m = std::make_shared<PatchTransformerBackbone>(to_int(k.get_int("patch", 8)), k.get_int("dim", 64),
                                                        to_int(k.get_int("depth", 2)), to_int(k.get_int("heads", 4)),
                                                        to_int(k.get_int("num_levels", 1)));
    k.finish();
    return make_object<Backbone>(m);
  });

  // Encoder slot
  c.add("detkit.TransformerEncoder", [](Kwargs& k) {
    auto m = std::make_shared<TransformerEncoder>(to_int(k.get_int("num_layers", 6)), k.get_int("dim", 256),
                                                  to_int(k.get_int("heads", 8)), k.get_int("ffn_dim", 1024));
    k.finish();
    return make_object<Encoder>(m);
  });
  c.add("detkit.DeformableEncoder", [](Kwargs& k) {
    auto m = std::make_shared<DeformableEncoder>(to_int(k.get_int("num_layers", 6)), k.get_int("dim", 256),
                                                 to_int(k.get_int("heads", 8)), k.get_int("ffn_dim", 1024),
                                                 to_int(k.get_int("levels", 4)), to_int(k.get_int("points", 4)));
    k.finish();
    return make_object<Encoder>(m);
  });

  // Query-initialization slot
  c.add("detkit.LearnedQueries", [](Kwargs& k) {
    const auto mode = pick<LearnedQueries::Mode>(k, "mode", "position",
                                                 {{"position", LearnedQueries::Mode::kPosition},
                                                  {"anchor", LearnedQueries::Mode::kAnchor}});
    auto m = std::make_shared<LearnedQueries>(k.get_int("num_queries", 100), k.get_int("dim", 256), mode,
                                              k.get_bool("with_anchors", false));
    k.finish();
    return make_object<QueryInit>(m);
  });
  c.add("detkit.TwoStageQueries", [](Kwargs& k) {
    const auto content = pick<TwoStageQueries::Content>(k, "content", "learned",
                                                        {{"learned", TwoStageQueries::Content::kLearned},
                                                         {"proposals", TwoStageQueries::Content::kFromProposals}});
    auto m = std::make_shared<TwoStageQueries>(k.get_int("num_queries", 100), k.get_int("dim", 256),
                                               k.get_int("num_classes"), content);
    k.finish();
    return make_object<QueryInit>(m);
  });

  // Decoder slot
  c.add("detkit.TransformerDecoder", [](Kwargs& k) {
    DecoderOptions o;
    o.num_layers = to_int(k.get_int("num_layers", o.num_layers));
    o.dim = k.get_int("dim", o.dim);
    o.heads = to_int(k.get_int("heads", o.heads));
    o.ffn_dim = k.get_int("ffn_dim", o.ffn_dim);
    o.cross_attention = pick<DecoderOptions::CrossAttention>(
        k, "cross_attention", "dense",
        {{"dense", DecoderOptions::CrossAttention::kDense},
         {"conditional", DecoderOptions::CrossAttention::kConditional},
         {"deformable", DecoderOptions::CrossAttention::kDeformable}});
    o.query_pos = pick<DecoderOptions::QueryPos>(
        k, "query_pos", "learned",
        {{"learned", DecoderOptions::QueryPos::kLearned}, {"anchor", DecoderOptions::QueryPos::kAnchor}});
    o.levels = to_int(k.get_int("levels", o.levels));
    o.points = to_int(k.get_int("points", o.points));
    o.box_refine = k.get_bool("box_refine", o.box_refine);
    o.look_forward_twice = k.get_bool("look_forward_twice", o.look_forward_twice);
    auto m = std::make_shared<TransformerDecoder>(o);
    k.finish();
    return make_object<Decoder>(m);
  });

  // Matcher + loss
  c.add("detkit.SetCriterion", [](Kwargs& k) {
    criterion::LossWeights w;
    w.class_weight = k.get_double("class_weight", w.class_weight);
    w.l1_weight = k.get_double("l1_weight", w.l1_weight);
    w.giou_weight = k.get_double("giou_weight", w.giou_weight);
    w.aux_enabled = k.get_bool("aux_loss", w.aux_enabled);
    w.dn_weight = k.get_double("dn_weight", w.dn_weight);
    const double alpha = k.get_double("focal_alpha", 0.25);
    const double gamma = k.get_double("focal_gamma", 2.0);
    geometry::MatchWeights mw;
    mw.class_weight = k.get_double("match_class_weight", w.class_weight);
    mw.l1_weight = k.get_double("match_l1_weight", w.l1_weight);
    mw.giou_weight = k.get_double("match_giou_weight", w.giou_weight);
    mw.alpha = alpha;
    mw.gamma = gamma;
    auto m = std::make_shared<criterion::SetCriterion>(k.get_int("num_classes"), w, mw,
                                                       k.get_bool("tie_matcher_class_weight", true), alpha, gamma);
    k.finish();
    return make_object<criterion::SetCriterion>(m);
  });

  c.add("detkit.Detector", [](Kwargs& k) {
    DetectorOptions o;
    o.num_classes = k.get_int("num_classes", o.num_classes);
    o.dim = k.get_int("dim", o.dim);
    o.num_feature_levels = to_int(k.get_int("num_feature_levels", o.num_feature_levels));
    DenoisingOptions dn;
    dn.num_groups = to_int(k.get_int("dn_groups", dn.num_groups));
    dn.label_noise_ratio = k.get_double("label_noise_ratio", dn.label_noise_ratio);
    dn.box_noise_scale = k.get_double("box_noise_scale", dn.box_noise_scale);
    dn.contrastive = k.get_bool("contrastive", dn.contrastive);
    auto m = std::make_shared<Detector>(k.object<Backbone>("backbone"), k.object<Encoder>("encoder"),
                                        k.object<QueryInit>("query_init"), k.object<Decoder>("decoder"),
                                        k.object<criterion::SetCriterion>("criterion"), o, dn);
    k.finish();
    return make_object<Detector>(m);
  });

  // Datasets
  c.add("detkit.data.ShapesDataset", [](Kwargs& k) {
    data::ShapesOptions o;
    o.seed = static_cast<uint64_t>(k.get_int("seed", 0));
    o.num_images = to_int(k.get_int("num_images", o.num_images));
    o.image_size = to_int(k.get_int("image_size", o.image_size));
    o.max_objects = to_int(k.get_int("max_objects", o.max_objects));
    o.min_extent = k.get_double("min_extent", o.min_extent);
    o.max_extent = k.get_double("max_extent", o.max_extent);
    k.finish();
    return make_object<const data::Dataset>(std::make_shared<const data::Dataset>(data::generate_shapes_dataset(o)));
  });
  c.add("detkit.data.CocoDataset", [](Kwargs& k) {
    const std::string ann = k.get_string("annotations");
    const std::string root_arg = k.get_string("image_root", "");
    const std::filesystem::path root = root_arg.empty() ? std::filesystem::path(ann).parent_path() : std::filesystem::path(root_arg);
    const bool load = k.get_bool("load_images", true);
    k.finish();
    return make_object<const data::Dataset>(std::make_shared<const data::Dataset>(
        data::load_coco_annotations(ann, root, load)));
  });
}

}  // namespace detkit::config::detail
