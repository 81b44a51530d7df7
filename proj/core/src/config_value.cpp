#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "detkit/config.hpp"

namespace detkit::config {

Value::Value(List list) : v_(std::make_shared<const List>(std::move(list))) {}
Value::Value(Dict dict) : v_(std::make_shared<const Dict>(std::move(dict))) {}
Value::Value(LazySpec spec) : v_(std::make_shared<const LazySpec>(std::move(spec))) {}

Value Value::object(std::any obj, std::string type_name) {
  Value v;
  v.v_ = std::make_shared<const Object>(Object{std::move(obj), std::move(type_name)});
  return v;
}

const char* Value::kind_name() const {
  switch (kind()) {
    case Kind::kNone: return "None";
    case Kind::kBool: return "bool";
    case Kind::kInt: return "int";
    case Kind::kFloat: return "float";
    case Kind::kString: return "str";
    case Kind::kList: return "list";
    case Kind::kDict: return "dict";
    case Kind::kLazy: return "lazy";
    case Kind::kObject: return "object";
  }
  return "?";
}

namespace {
[[noreturn]] void wrong_kind(const Value& v, const char* wanted) {
  throw EvaluationError(std::string("expected ") + wanted + ", got " + v.kind_name());
}
}  // namespace

bool Value::as_bool() const {
  if (kind() != Kind::kBool) wrong_kind(*this, "bool");
  return std::get<bool>(v_);
}

int64_t Value::as_int() const {
  if (kind() != Kind::kInt) wrong_kind(*this, "int");
  return std::get<int64_t>(v_);
}

double Value::as_number() const {
  if (kind() == Kind::kInt) return static_cast<double>(std::get<int64_t>(v_));
  if (kind() != Kind::kFloat) wrong_kind(*this, "number");
  return std::get<double>(v_);
}

const std::string& Value::as_string() const {
  if (kind() != Kind::kString) wrong_kind(*this, "str");
  return std::get<std::string>(v_);
}

const List& Value::as_list() const {
  if (kind() != Kind::kList) wrong_kind(*this, "list");
  return *std::get<std::shared_ptr<const List>>(v_);
}

const Dict& Value::as_dict() const {
  if (kind() != Kind::kDict) wrong_kind(*this, "dict");
  return *std::get<std::shared_ptr<const Dict>>(v_);
}

const LazySpec& Value::as_lazy() const {
  if (kind() != Kind::kLazy) wrong_kind(*this, "lazy");
  return *std::get<std::shared_ptr<const LazySpec>>(v_);
}

const Object& Value::as_object() const {
  if (kind() != Kind::kObject) wrong_kind(*this, "object");
  return *std::get<std::shared_ptr<const Object>>(v_);
}

const Value* Value::child(const std::string& key) const {
  const Dict* d = nullptr;
  if (kind() == Kind::kDict) d = &as_dict();
  if (kind() == Kind::kLazy) d = &as_lazy().kwargs;
  if (!d) return nullptr;
  auto it = d->find(key);
  return it == d->end() ? nullptr : &it->second;
}

Value Value::with_child(const std::string& key, Value v) const {
  if (kind() == Kind::kDict) {
    Dict d = as_dict();
    d[key] = std::move(v);
    return Value(std::move(d));
  }
  if (kind() == Kind::kLazy) {
    LazySpec s = as_lazy();
    s.kwargs[key] = std::move(v);
    return Value(std::move(s));
  }
  throw BadKeyPath("cannot set '" + key + "' on a " + kind_name());
}

bool Value::operator==(const Value& other) const {
  if (kind() != other.kind()) return false;
  switch (kind()) {
    case Kind::kNone: return true;
    case Kind::kBool: return as_bool() == other.as_bool();
    case Kind::kInt: return as_int() == other.as_int();
    case Kind::kFloat: return std::get<double>(v_) == std::get<double>(other.v_);
    case Kind::kString: return as_string() == other.as_string();
    case Kind::kList: return as_list() == other.as_list();
    case Kind::kDict: return as_dict() == other.as_dict();
    case Kind::kLazy: return as_lazy() == other.as_lazy();
    case Kind::kObject: return &as_object() == &other.as_object();
  }
  return false;
}

std::vector<std::string> split_path(std::string_view path) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    parts.emplace_back(path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  for (const auto& p : parts)
    if (p.empty()) throw BadKeyPath("empty segment in key path '" + std::string(path) + "'");
  return parts;
}

std::vector<std::string> ConfigTree::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : root_) out.push_back(k);
  return out;
}

const Value* ConfigTree::find(std::string_view path) const {
  const auto parts = split_path(path);
  auto it = root_.find(parts[0]);
  if (it == root_.end()) return nullptr;
  const Value* cur = &it->second;
  for (size_t i = 1; i < parts.size() && cur; ++i) cur = cur->child(parts[i]);
  return cur;
}

const Value& ConfigTree::at(std::string_view path) const {
  const Value* v = find(path);
  if (!v) throw BadKeyPath("no config node at '" + std::string(path) + "'");
  return *v;
}

namespace {

Value set_in(const Value& node, const std::vector<std::string>& parts, size_t i, Value leaf, std::string_view full) {
  if (!node.is_mapping()) {
    throw BadKeyPath("'" + std::string(full) + "': segment '" + parts[i - 1] + "' is a " + node.kind_name() +
                     ", not a mapping");
  }
  if (i + 1 == parts.size()) return node.with_child(parts[i], std::move(leaf));
  const Value* next = node.child(parts[i]);
  if (!next) throw BadKeyPath("'" + std::string(full) + "': missing intermediate key '" + parts[i] + "'");
  return node.with_child(parts[i], set_in(*next, parts, i + 1, std::move(leaf), full));
}

}  // namespace

ConfigTree ConfigTree::with(std::string_view path, Value v) const {
  const auto parts = split_path(path);
  Dict root = root_;
  if (parts.size() == 1) {
    root[parts[0]] = std::move(v);
    return ConfigTree(std::move(root));
  }
  auto it = root.find(parts[0]);
  if (it == root.end()) throw BadKeyPath("'" + std::string(path) + "': missing top-level key '" + parts[0] + "'");
  it->second = set_in(it->second, parts, 1, std::move(v), path);
  return ConfigTree(std::move(root));
}

// ---------------------------------------------------------------------------
// Canonical text form

namespace {

bool is_identifier(const std::string& s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  return true;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out + "\"";
}

std::string format_float(double d) {
  if (!std::isfinite(d)) throw Unserializable("non-finite float cannot be dumped");
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), d);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

bool is_scalar(const Value& v) {
  switch (v.kind()) {
    case Value::Kind::kList: return v.as_list().empty();
    case Value::Kind::kDict: return v.as_dict().empty();
    case Value::Kind::kLazy: return v.as_lazy().kwargs.empty();
    default: return true;
  }
}

void emit(const Value& v, int indent, std::string& out);

void emit_entries(const Dict& d, bool as_kwargs, int indent, std::string& out) {
  const std::string pad(static_cast<size_t>(indent + 4), ' ');
  for (const auto& [k, child] : d) {
    out += pad;
    if (as_kwargs) {
      if (!is_identifier(k)) throw Unserializable("lazy argument name '" + k + "' is not an identifier");
      out += k + "=";
    } else {
      out += quote(k) + ": ";
    }
    emit(child, indent + 4, out);
    out += ",\n";
  }
  out += std::string(static_cast<size_t>(indent), ' ');
}

void emit(const Value& v, int indent, std::string& out) {
  switch (v.kind()) {
    case Value::Kind::kNone: out += "None"; return;
    case Value::Kind::kBool: out += v.as_bool() ? "True" : "False"; return;
    case Value::Kind::kInt: out += std::to_string(v.as_int()); return;
    case Value::Kind::kFloat: out += format_float(v.as_number()); return;
    case Value::Kind::kString: out += quote(v.as_string()); return;
    case Value::Kind::kList: {
      const auto& list = v.as_list();
      bool flat = true;
      for (const auto& e : list) flat = flat && is_scalar(e);
      if (flat) {
        out += "[";
        for (size_t i = 0; i < list.size(); ++i) {
          if (i) out += ", ";
          emit(list[i], indent, out);
        }
        out += "]";
        return;
      }
      out += "[\n";
      const std::string pad(static_cast<size_t>(indent + 4), ' ');
      for (const auto& e : list) {
        out += pad;
        emit(e, indent + 4, out);
        out += ",\n";
      }
      out += std::string(static_cast<size_t>(indent), ' ') + "]";
      return;
    }
    case Value::Kind::kDict: {
      if (v.as_dict().empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      emit_entries(v.as_dict(), false, indent, out);
      out += "}";
      return;
    }
    case Value::Kind::kLazy: {
      const auto& spec = v.as_lazy();
      out += "L(" + quote(spec.target) + ")(";
      if (!spec.kwargs.empty()) {
        out += "\n";
        emit_entries(spec.kwargs, true, indent, out);
      }
      out += ")";
      return;
    }
    case Value::Kind::kObject:
      throw Unserializable("leaf holds a live object of type " + v.as_object().type_name);
  }
}

}  // namespace

std::string format_value(const Value& v) {
  std::string out;
  emit(v, 0, out);
  return out;
}

std::string dump_config_string(const ConfigTree& tree) {
  std::string out = "# detkit config, canonical form\n";
  for (const auto& [k, v] : tree.root()) {
    if (!is_identifier(k)) throw Unserializable("top-level name '" + k + "' is not an identifier");
    out += k + " = ";
    emit(v, 0, out);
    out += "\n";
  }
  return out;
}

void dump_config(const ConfigTree& tree, const std::filesystem::path& path) {
  const std::string text = dump_config_string(tree);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Unserializable("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Unserializable("failed writing " + path.string());
}

}  // namespace detkit::config
