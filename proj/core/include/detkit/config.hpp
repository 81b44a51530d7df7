#pragma once

#include <any>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "detkit/errors.hpp"

// Lazy configuration trees.
//
// A config is a `.cfg` file in a small Python-flavoured language that is
// executed top to bottom. Its public top-level names form a ConfigTree whose
// leaves are plain data or LazySpecs (deferred constructor calls). Nothing is
// constructed until instantiate() is called on a node.
//
//   from "../../../configs/common/schedule.cfg" import lr_scheduler, train
//   model = L("detkit.Detector")(
//       backbone=L("detkit.ResNetBackbone")(stem_channels=16),
//       num_classes=3,
//   )
//   train.max_iter = 2000
namespace detkit::config {

DETKIT_DEFINE_ERROR(FileMissing);
DETKIT_DEFINE_ERROR(EvaluationError);
DETKIT_DEFINE_ERROR(EmptyConfig);
DETKIT_DEFINE_ERROR(BadKeyPath);
DETKIT_DEFINE_ERROR(ParseError);
DETKIT_DEFINE_ERROR(TargetNotFound);
DETKIT_DEFINE_ERROR(ConstructorError);
DETKIT_DEFINE_ERROR(Unserializable);

class Value;
using List = std::vector<Value>;
using Dict = std::map<std::string, Value>;

struct LazySpec;

// A live constructed object. Never serializable.
struct Object {
  std::any value;
  std::string type_name;
};

// Immutable tree value. Copies are cheap and share structure.
class Value {
 public:
  enum class Kind { kNone, kBool, kInt, kFloat, kString, kList, kDict, kLazy, kObject };

  Value() = default;
  Value(std::nullptr_t) {}
  Value(bool b) : v_(b) {}
  Value(int i) : v_(static_cast<int64_t>(i)) {}
  Value(int64_t i) : v_(i) {}
  Value(double d) : v_(d) {}
  Value(std::string s) : v_(std::move(s)) {}
  Value(const char* s) : v_(std::string(s)) {}
  Value(List list);
  Value(Dict dict);
  Value(LazySpec spec);
  static Value object(std::any obj, std::string type_name);

  Kind kind() const { return static_cast<Kind>(v_.index()); }
  const char* kind_name() const;
  bool is_none() const { return kind() == Kind::kNone; }
  bool is_number() const { return kind() == Kind::kInt || kind() == Kind::kFloat; }
  bool is_mapping() const { return kind() == Kind::kDict || kind() == Kind::kLazy; }

  bool as_bool() const;
  int64_t as_int() const;
  double as_number() const;
  const std::string& as_string() const;
  const List& as_list() const;
  const Dict& as_dict() const;
  const LazySpec& as_lazy() const;
  const Object& as_object() const;

  // Child lookup through dict entries or lazy kwargs; null if absent.
  const Value* child(const std::string& key) const;
  // Copy with one child replaced or added. Requires is_mapping().
  Value with_child(const std::string& key, Value v) const;

  // Structural equality; live objects compare by identity.
  bool operator==(const Value& other) const;

 private:
  std::variant<std::monostate, bool, int64_t, double, std::string, std::shared_ptr<const List>,
               std::shared_ptr<const Dict>, std::shared_ptr<const LazySpec>, std::shared_ptr<const Object>>
      v_;
};

struct LazySpec {
  std::string target;
  Dict kwargs;
  bool operator==(const LazySpec& other) const { return target == other.target && kwargs == other.kwargs; }
};

// The evaluated top-level namespace of a config file.
class ConfigTree {
 public:
  ConfigTree() = default;
  explicit ConfigTree(Dict root) : root_(std::move(root)) {}

  const Dict& root() const { return root_; }
  std::vector<std::string> keys() const;
  bool has(std::string_view path) const { return find(path) != nullptr; }
  const Value* find(std::string_view path) const;
  // Throws BadKeyPath when absent.
  const Value& at(std::string_view path) const;
  // New tree with `path` set. Every intermediate segment must exist and be a
  // dict or lazy spec; the leaf may be new.
  ConfigTree with(std::string_view path, Value v) const;

  bool operator==(const ConfigTree& other) const { return root_ == other.root_; }

 private:
  Dict root_;
};

std::vector<std::string> split_path(std::string_view path);

// Executes a config file. Errors: FileMissing, EvaluationError, EmptyConfig.
ConfigTree load_config(const std::filesystem::path& path);
// Executes config source text; `origin` resolves relative imports.
ConfigTree load_config_string(std::string_view source, const std::filesystem::path& origin = ".");

// Parses an override value: literal (number, bool, None, string, list) when
// it parses as one, raw string otherwise.
Value parse_override_value(std::string_view text);
// Applies "dotted.key=value" overrides in order. Errors: BadKeyPath, ParseError.
ConfigTree apply_overrides(const ConfigTree& tree, const std::vector<std::string>& overrides);

// Canonical text form: sorted keys, one top-level assignment per name,
// shortest round-trip floats. Loading the text yields an equal tree.
// Errors: Unserializable.
std::string dump_config_string(const ConfigTree& tree);
void dump_config(const ConfigTree& tree, const std::filesystem::path& path);
// Canonical single-value rendering used by dumps and diagnostics.
std::string format_value(const Value& v);

}  // namespace detkit::config
