#pragma once

#include <any>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <typeinfo>
#include <vector>

#include "detkit/config.hpp"

namespace detkit::config {

// Arguments handed to a constructor. Nested lazy specs have already been
// instantiated and appear as objects.
class Kwargs {
 public:
  Kwargs(std::string path, Dict values) : path_(std::move(path)), values_(std::move(values)) {}

  const std::string& path() const { return path_; }
  bool has(const std::string& name) const { return values_.count(name) && !values_.at(name).is_none(); }
  const Value& raw(const std::string& name);

  int64_t get_int(const std::string& name);
  int64_t get_int(const std::string& name, int64_t fallback);
  double get_double(const std::string& name);
  double get_double(const std::string& name, double fallback);
  bool get_bool(const std::string& name, bool fallback);
  std::string get_string(const std::string& name);
  std::string get_string(const std::string& name, const std::string& fallback);
  std::vector<int64_t> get_ints(const std::string& name, std::vector<int64_t> fallback);
  std::vector<double> get_doubles(const std::string& name, std::vector<double> fallback);
  std::vector<std::string> get_strings(const std::string& name, std::vector<std::string> fallback);

  // Instantiated child holding std::shared_ptr<T>.
  template <typename T>
  std::shared_ptr<T> object(const std::string& name) {
    const Value& v = raw(name);
    if (v.kind() != Value::Kind::kObject) fail(name, std::string("expects a constructed object, got ") + v.kind_name());
    const auto* ptr = std::any_cast<std::shared_ptr<T>>(&v.as_object().value);
    if (!ptr) fail(name, "expects " + std::string(typeid(T).name()) + ", got " + v.as_object().type_name);
    return *ptr;
  }
  template <typename T>
  std::shared_ptr<T> object_or_null(const std::string& name) {
    if (!has(name)) {
      used_.insert(name);
      return nullptr;
    }
    return object<T>(name);
  }

  // Throws ConstructorError naming any argument never read.
  void finish() const;

 private:
  [[noreturn]] void fail(const std::string& name, const std::string& msg) const;

  std::string path_;
  Dict values_;
  std::set<std::string> used_;
};

using Factory = std::function<Value(Kwargs&)>;

// Maps fully-qualified target names to constructors. Components do not
// register themselves; the catalog is assembled outside the component code.
class Catalog {
 public:
  // Catalog with every built-in detkit target.
  static Catalog& global();

  void add(const std::string& target, Factory factory);
  bool contains(const std::string& target) const { return factories_.count(target) > 0; }
  const Factory* find(const std::string& target) const;
  std::vector<std::string> targets() const;

 private:
  std::map<std::string, Factory> factories_;
};

// Helper for factories returning a shared object through an interface type.
template <typename Interface, typename Impl>
Value make_object(std::shared_ptr<Impl> obj) {
  return Value::object(std::shared_ptr<Interface>(std::move(obj)), typeid(Interface).name());
}

// Recursive bottom-up construction. Plain values pass through unchanged;
// lists and dicts are rebuilt with their lazy members constructed.
// Errors: TargetNotFound, ConstructorError (both carry the dotted path).
Value instantiate(const Value& node, const std::string& path = "", const Catalog& catalog = Catalog::global());

template <typename T>
std::shared_ptr<T> instantiate_as(const Value& node, const std::string& path = "",
                                  const Catalog& catalog = Catalog::global()) {
  Value v = instantiate(node, path, catalog);
  if (v.kind() != Value::Kind::kObject) throw ConstructorError(path + ": node is not a lazy spec");
  const auto* ptr = std::any_cast<std::shared_ptr<T>>(&v.as_object().value);
  if (!ptr) throw ConstructorError(path + ": constructed " + v.as_object().type_name + ", wanted " + typeid(T).name());
  return *ptr;
}

namespace detail {
void register_builtin_targets(Catalog& catalog);
}

}  // namespace detkit::config
