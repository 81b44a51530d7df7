#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "detkit/config.hpp"
#include "detkit/geometry.hpp"
#include "detkit/instantiate.hpp"

using namespace detkit::config;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("detkit_cfg_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

struct Counted {
  int64_t depth;
  std::shared_ptr<Counted> child;
};

Catalog counting_catalog(int& calls) {
  Catalog c;
  c.add("test.Node", [&calls](Kwargs& k) {
    ++calls;
    auto n = std::make_shared<Counted>();
    n->depth = k.get_int("depth", 0);
    n->child = k.object_or_null<Counted>("child");
    k.finish();
    return make_object<Counted>(n);
  });
  return c;
}

}  // namespace

TEST(LoadConfig, ReadsDottedAssignment) {
  auto t = load_config_string("train = dict(max_iter=1)\ntrain.max_iter = 90000\n");
  EXPECT_EQ(t.at("train.max_iter").as_int(), 90000);
}

TEST(LoadConfig, Errors) {
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), FileMissing);
  EXPECT_THROW(load_config_string(""), EmptyConfig);
  EXPECT_THROW(load_config_string("# only a comment\n_private = 3\n"), EmptyConfig);
  EXPECT_THROW(load_config_string("x = undefined_name\n"), EvaluationError);
  EXPECT_THROW(load_config_string("x = dict(a=1\n"), EvaluationError);
}

TEST(LoadConfig, NestedSpecsStayLazy) {
  int calls = 0;
  Catalog c = counting_catalog(calls);
  auto t = load_config_string("model = L(\"test.Node\")(depth=1, child=L(\"test.Node\")(depth=2))\n");
  EXPECT_EQ(calls, 0);
  const auto& spec = t.at("model").as_lazy();
  EXPECT_EQ(spec.target, "test.Node");
  EXPECT_EQ(spec.kwargs.at("child").as_lazy().kwargs.at("depth").as_int(), 2);
  auto obj = instantiate_as<Counted>(t.at("model"), "model", c);
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(obj->depth, 1);
  ASSERT_TRUE(obj->child);
  EXPECT_EQ(obj->child->depth, 2);
}

TEST(LoadConfig, RelativeImports) {
  auto d = scratch_dir("imports");
  fs::create_directories(d / "common");
  write(d / "common" / "base.cfg", "train = dict(max_iter=100, seed=1)\n_hidden = 5\n");
  write(d / "exp.cfg", "from \"common/base.cfg\" import train\ntrain.seed = 7\nlist_v = [1, 2.5, \"s\", True, None]\n");
  auto t = load_config(d / "exp.cfg");
  EXPECT_EQ(t.at("train.max_iter").as_int(), 100);
  EXPECT_EQ(t.at("train.seed").as_int(), 7);
  EXPECT_FALSE(t.has("_hidden"));
  const auto& l = t.at("list_v").as_list();
  ASSERT_EQ(l.size(), 5u);
  EXPECT_EQ(l[1].as_number(), 2.5);
  EXPECT_EQ(l[2].as_string(), "s");
  EXPECT_TRUE(l[3].as_bool());
  EXPECT_TRUE(l[4].is_none());
}

TEST(Overrides, ParseLiteralsThenStrings) {
  EXPECT_EQ(parse_override_value("180000").as_int(), 180000);
  EXPECT_EQ(parse_override_value("2e-5").as_number(), 2e-5);
  EXPECT_EQ(parse_override_value("True").as_bool(), true);
  EXPECT_TRUE(parse_override_value("None").is_none());
  EXPECT_EQ(parse_override_value("[1, 2]").as_list().size(), 2u);
  EXPECT_EQ(parse_override_value("\"quoted\"").as_string(), "quoted");
  EXPECT_EQ(parse_override_value("res5").as_string(), "res5");
}

TEST(Overrides, ValueSemantics) {
  auto t = load_config_string("train = dict(max_iter=90000)\noptimizer = dict(params=dict(lr=1e-4))\n");
  auto u = apply_overrides(t, {"train.max_iter=180000", "optimizer.params.backbone_lr=2e-5"});
  EXPECT_EQ(u.at("train.max_iter").as_int(), 180000);
  EXPECT_EQ(u.at("optimizer.params.backbone_lr").as_number(), 2e-5);
  EXPECT_EQ(t.at("train.max_iter").as_int(), 90000);
  EXPECT_FALSE(t.has("optimizer.params.backbone_lr"));
}

TEST(Overrides, Errors) {
  auto t = load_config_string("train = dict(max_iter=1)\n");
  EXPECT_THROW(apply_overrides(t, {"a.b=1"}), BadKeyPath);
  EXPECT_THROW(apply_overrides(t, {"train.max_iter"}), ParseError);
  EXPECT_THROW(apply_overrides(t, {"=3"}), ParseError);
  EXPECT_THROW(apply_overrides(t, {"train.max_iter.x=3"}), BadKeyPath);
}

TEST(Overrides, CommuteWithInstantiate) {
  int calls = 0;
  Catalog c = counting_catalog(calls);
  auto base = load_config_string("model = L(\"test.Node\")(depth=1)\n");
  auto overridden = apply_overrides(base, {"model.depth=4"});
  auto direct = load_config_string("model = L(\"test.Node\")(depth=4)\n");
  EXPECT_EQ(overridden, direct);
  EXPECT_EQ(instantiate_as<Counted>(overridden.at("model"), "model", c)->depth,
            instantiate_as<Counted>(direct.at("model"), "model", c)->depth);
}

TEST(Instantiate, PassThroughAndErrors) {
  EXPECT_EQ(instantiate(Value(42)).as_int(), 42);
  auto t = load_config_string("a = L(\"no.such.thing\")()\nb = L(\"detkit.geometry.BoxConverter\")(format=\"xyxy\", typo=1)\n");
  try {
    instantiate(t.at("a"), "a");
    FAIL();
  } catch (const TargetNotFound& e) {
    EXPECT_NE(std::string(e.what()).find("no.such.thing"), std::string::npos);
  }
  try {
    instantiate(t.at("b"), "b");
    FAIL();
  } catch (const ConstructorError& e) {
    EXPECT_NE(std::string(e.what()).find("typo"), std::string::npos);
  }
}

TEST(Instantiate, BoxConverterTarget) {
  auto t = load_config_string("conv = L(\"detkit.geometry.BoxConverter\")(format=\"xyxy\")\n");
  auto conv = instantiate_as<detkit::geometry::BoxConverter>(t.at("conv"), "conv");
  EXPECT_EQ(conv->format(), detkit::geometry::BoxFormat::kXyxyAbs);
}

TEST(Dump, RoundTripAndByteStable) {
  const std::string src =
      "train = dict(max_iter=90000, lr_milestones=[80000], gamma=0.1, name=\"x y\", ema=None, on=True)\n"
      "model = L(\"detkit.Detector\")(dim=64, backbone=L(\"detkit.ResNetBackbone\")(out_features=[\"res5\"]))\n"
      "weird = dict(f=1e-300, g=-0.30000000000000004, q=\"a\\\"b\\\\c\")\n";
  auto t = load_config_string(src);
  const std::string a = dump_config_string(t);
  EXPECT_EQ(a, dump_config_string(load_config_string(src)));
  auto back = load_config_string(a);
  EXPECT_EQ(back, t);
  EXPECT_EQ(dump_config_string(back), a);

  auto d = scratch_dir("dump");
  dump_config(t, d / "c.cfg");
  EXPECT_EQ(load_config(d / "c.cfg"), t);
}

TEST(Dump, LiveObjectIsUnserializable) {
  Dict root;
  root["handle"] = Value::object(std::make_shared<std::ofstream>(), "ofstream");
  EXPECT_THROW(dump_config_string(ConfigTree(root)), Unserializable);
}

TEST(Tree, PathsAddressOneNode) {
  auto t = load_config_string("a = dict(b=dict(c=1), d=[1])\n");
  EXPECT_EQ(t.at("a.b.c").as_int(), 1);
  EXPECT_FALSE(t.has("a.x"));
  EXPECT_THROW(t.at("a.b.x"), BadKeyPath);
  EXPECT_EQ(split_path("a.b.c"), (std::vector<std::string>{"a", "b", "c"}));
}
