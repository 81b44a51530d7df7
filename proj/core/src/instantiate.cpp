#include "detkit/instantiate.hpp"

namespace detkit::config {

const Value& Kwargs::raw(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) fail(name, "missing required argument");
  used_.insert(name);
  return it->second;
}

void Kwargs::fail(const std::string& name, const std::string& msg) const {
  throw ConstructorError(path_ + "." + name + ": " + msg);
}

int64_t Kwargs::get_int(const std::string& name) {
  const Value& v = raw(name);
  if (v.kind() != Value::Kind::kInt) fail(name, std::string("expects int, got ") + v.kind_name());
  return v.as_int();
}

int64_t Kwargs::get_int(const std::string& name, int64_t fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  return get_int(name);
}

double Kwargs::get_double(const std::string& name) {
  const Value& v = raw(name);
  if (!v.is_number()) fail(name, std::string("expects number, got ") + v.kind_name());
  return v.as_number();
}

double Kwargs::get_double(const std::string& name, double fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  return get_double(name);
}

bool Kwargs::get_bool(const std::string& name, bool fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  const Value& v = raw(name);
  if (v.kind() != Value::Kind::kBool) fail(name, std::string("expects bool, got ") + v.kind_name());
  return v.as_bool();
}

std::string Kwargs::get_string(const std::string& name) {
  const Value& v = raw(name);
  if (v.kind() != Value::Kind::kString) fail(name, std::string("expects str, got ") + v.kind_name());
  return v.as_string();
}

std::string Kwargs::get_string(const std::string& name, const std::string& fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  return get_string(name);
}

std::vector<int64_t> Kwargs::get_ints(const std::string& name, std::vector<int64_t> fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  const Value& v = raw(name);
  if (v.kind() != Value::Kind::kList) fail(name, std::string("expects list, got ") + v.kind_name());
  std::vector<int64_t> out;
  for (const auto& e : v.as_list()) {
    if (e.kind() != Value::Kind::kInt) fail(name, "expects a list of ints");
    out.push_back(e.as_int());
  }
  return out;
}

std::vector<double> Kwargs::get_doubles(const std::string& name, std::vector<double> fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  const Value& v = raw(name);
  if (v.kind() != Value::Kind::kList) fail(name, std::string("expects list, got ") + v.kind_name());
  std::vector<double> out;
  for (const auto& e : v.as_list()) {
    if (!e.is_number()) fail(name, "expects a list of numbers");
    out.push_back(e.as_number());
  }
  return out;
}

std::vector<std::string> Kwargs::get_strings(const std::string& name, std::vector<std::string> fallback) {
  if (!has(name)) {
    used_.insert(name);
    return fallback;
  }
  const Value& v = raw(name);
  if (v.kind() != Value::Kind::kList) fail(name, std::string("expects list, got ") + v.kind_name());
  std::vector<std::string> out;
  for (const auto& e : v.as_list()) {
    if (e.kind() != Value::Kind::kString) fail(name, "expects a list of strings");
    out.push_back(e.as_string());
  }
  return out;
}

void Kwargs::finish() const {
  for (const auto& [k, _] : values_)
    if (!used_.count(k)) throw ConstructorError(path_ + ": unexpected argument '" + k + "'");
}

Catalog& Catalog::global() {
  static Catalog* catalog = [] {
    auto* c = new Catalog();
    detail::register_builtin_targets(*c);
    return c;
  }();
  return *catalog;
}

void Catalog::add(const std::string& target, Factory factory) { factories_[target] = std::move(factory); }

const Factory* Catalog::find(const std::string& target) const {
  auto it = factories_.find(target);
  return it == factories_.end() ? nullptr : &it->second;
}

std::vector<std::string> Catalog::targets() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : factories_) out.push_back(k);
  return out;
}

namespace {
std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }
}  // namespace

Value instantiate(const Value& node, const std::string& path, const Catalog& catalog) {
  switch (node.kind()) {
    case Value::Kind::kList: {
      List out;
      const auto& list = node.as_list();
      for (size_t i = 0; i < list.size(); ++i)
        out.push_back(instantiate(list[i], path + "[" + std::to_string(i) + "]", catalog));
      return Value(std::move(out));
    }
    case Value::Kind::kDict: {
      Dict out;
      for (const auto& [k, v] : node.as_dict()) out[k] = instantiate(v, join(path, k), catalog);
      return Value(std::move(out));
    }
    case Value::Kind::kLazy: {
      const auto& spec = node.as_lazy();
      const Factory* factory = catalog.find(spec.target);
      if (!factory) {
        throw TargetNotFound((path.empty() ? std::string("<root>") : path) + ": unknown target '" + spec.target + "'");
      }
      Dict args;
      for (const auto& [k, v] : spec.kwargs) args[k] = instantiate(v, join(path, k), catalog);
      Kwargs kwargs(path.empty() ? spec.target : path, std::move(args));
      try {
        Value built = (*factory)(kwargs);
        kwargs.finish();
        return built;
      } catch (const ConstructorError&) {
        throw;
      } catch (const TargetNotFound&) {
        throw;
      } catch (const std::exception& e) {
        throw ConstructorError((path.empty() ? spec.target : path) + ": " + e.what());
      }
    }
    default: return node;
  }
}

}  // namespace detkit::config
