// Evaluator for the .cfg language: assignments, `from "file" import names`,
// literals, lists, dicts, `dict(k=v)`, `L("target")(k=v)`, dotted reads,
// subscripts, and + - * / on numbers, strings and lists.

#include <cctype>
#include <charconv>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "detkit/config.hpp"

namespace detkit::config {

namespace {

enum class TokKind { kName, kInt, kFloat, kString, kOp, kNewline, kEnd };

struct Token {
  TokKind kind;
  std::string text;
  int line;
  int64_t int_value = 0;
  double float_value = 0.0;
};

class Lexer {
 public:
  Lexer(std::string_view src, std::string origin) : src_(src), origin_(std::move(origin)) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    int depth = 0;
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') ++pos_;
      } else if (c == '\n') {
        if (depth == 0 && !out.empty() && out.back().kind != TokKind::kNewline) out.push_back({TokKind::kNewline, "\\n", line_});
        ++line_;
        ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        const size_t start = pos_;
        while (pos_ < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) ++pos_;
        out.push_back({TokKind::kName, std::string(src_.substr(start, pos_ - start)), line_});
      } else if (std::isdigit(static_cast<unsigned char>(c)) ||
                 (c == '.' && pos_ + 1 < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_ + 1])))) {
        out.push_back(number());
      } else if (c == '"' || c == '\'') {
        out.push_back(string_literal(c));
      } else if (std::string_view("=.,()[]{}:+-*/").find(c) != std::string_view::npos) {
        if (c == '(' || c == '[' || c == '{') ++depth;
        if (c == ')' || c == ']' || c == '}') depth = std::max(0, depth - 1);
        out.push_back({TokKind::kOp, std::string(1, c), line_});
        ++pos_;
      } else {
        fail(std::string("unexpected character '") + c + "'");
      }
    }
    if (!out.empty() && out.back().kind != TokKind::kNewline) out.push_back({TokKind::kNewline, "\\n", line_});
    out.push_back({TokKind::kEnd, "<end>", line_});
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw EvaluationError(origin_ + ":" + std::to_string(line_) + ": " + msg);
  }

  Token number() {
    const size_t start = pos_;
    bool is_float = false;
    auto digits = [&] {
      while (pos_ < src_.size() && (std::isdigit(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) ++pos_;
    };
    digits();
    if (pos_ < src_.size() && src_[pos_] == '.') {
      is_float = true;
      ++pos_;
      digits();
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      is_float = true;
      ++pos_;
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
      const size_t exp_start = pos_;
      digits();
      if (pos_ == exp_start) fail("malformed exponent");
    }
    std::string text;
    for (char ch : src_.substr(start, pos_ - start))
      if (ch != '_') text += ch;
    Token t{is_float ? TokKind::kFloat : TokKind::kInt, text, line_};
    if (is_float) {
      auto res = std::from_chars(text.data(), text.data() + text.size(), t.float_value);
      if (res.ec != std::errc() || res.ptr != text.data() + text.size()) fail("malformed number '" + text + "'");
    } else {
      auto res = std::from_chars(text.data(), text.data() + text.size(), t.int_value);
      if (res.ec != std::errc() || res.ptr != text.data() + text.size()) fail("malformed integer '" + text + "'");
    }
    return t;
  }

  Token string_literal(char quote) {
    ++pos_;
    std::string out;
    while (true) {
      if (pos_ >= src_.size() || src_[pos_] == '\n') fail("unterminated string");
      const char c = src_[pos_++];
      if (c == quote) break;
      if (c == '\\') {
        if (pos_ >= src_.size()) fail("unterminated string");
        const char e = src_[pos_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '\\': out += '\\'; break;
          case '"': out += '"'; break;
          case '\'': out += '\''; break;
          default: fail(std::string("unknown escape \\") + e);
        }
      } else {
        out += c;
      }
    }
    return {TokKind::kString, out, line_};
  }

  std::string_view src_;
  std::string origin_;
  size_t pos_ = 0;
  int line_ = 1;
};

// Runtime values inside the evaluator: plain Values plus the callables.
struct Eval {
  enum class Kind { kValue, kBuiltinL, kBuiltinDict, kLazyCallable } kind = Kind::kValue;
  Value value;
  std::string target;
};

struct LoadContext {
  std::vector<std::filesystem::path> stack;
};

ConfigTree load_file(const std::filesystem::path& path, LoadContext& ctx);

class Interpreter {
 public:
  // In literal mode names, calls and imports are rejected (override values).
  Interpreter(std::vector<Token> tokens, std::string origin, std::filesystem::path base_dir, LoadContext* ctx,
              bool literal_mode)
      : toks_(std::move(tokens)),
        origin_(std::move(origin)),
        base_dir_(std::move(base_dir)),
        ctx_(ctx),
        literal_(literal_mode) {}

  Dict run_program() {
    while (peek().kind != TokKind::kEnd) {
      if (peek().kind == TokKind::kNewline) {
        ++i_;
        continue;
      }
      statement();
      expect_kind(TokKind::kNewline, "end of statement");
    }
    Dict out;
    for (const auto& [k, v] : names_)
      if (!k.empty() && k[0] != '_') out[k] = v;
    return out;
  }

  Value run_expression() {
    Eval e = expr();
    while (peek().kind == TokKind::kNewline) ++i_;
    if (peek().kind != TokKind::kEnd) fail("unexpected trailing '" + peek().text + "'");
    return to_value(e);
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw EvaluationError(origin_ + ":" + std::to_string(peek().line) + ": " + msg);
  }

  const Token& peek() const { return toks_[std::min(i_, toks_.size() - 1)]; }
  bool is_op(const char* op) const { return peek().kind == TokKind::kOp && peek().text == op; }
  bool accept_op(const char* op) {
    if (!is_op(op)) return false;
    ++i_;
    return true;
  }
  void expect_op(const char* op) {
    if (!accept_op(op)) fail(std::string("expected '") + op + "', found '" + peek().text + "'");
  }
  const Token& expect_kind(TokKind kind, const char* what) {
    if (peek().kind != kind) fail(std::string("expected ") + what + ", found '" + peek().text + "'");
    return toks_[i_++];
  }

  void statement() {
    if (peek().kind == TokKind::kName && peek().text == "from") {
      ++i_;
      import_statement();
      return;
    }
    std::vector<std::string> target{expect_kind(TokKind::kName, "assignment target").text};
    while (accept_op(".")) target.push_back(expect_kind(TokKind::kName, "attribute name").text);
    expect_op("=");
    Value v = to_value(expr());
    assign(target, std::move(v));
  }

  void import_statement() {
    const std::string rel = expect_kind(TokKind::kString, "quoted config path").text;
    const Token& kw = expect_kind(TokKind::kName, "'import'");
    if (kw.text != "import") fail("expected 'import'");
    std::vector<std::string> wanted{expect_kind(TokKind::kName, "imported name").text};
    while (accept_op(",")) wanted.push_back(expect_kind(TokKind::kName, "imported name").text);
    if (!ctx_) fail("imports are not allowed here");
    const std::filesystem::path path = base_dir_ / rel;
    ConfigTree imported = load_file(path, *ctx_);
    for (const auto& name : wanted) {
      auto it = imported.root().find(name);
      if (it == imported.root().end()) fail("'" + rel + "' does not define '" + name + "'");
      names_[name] = it->second;
    }
  }

  void assign(const std::vector<std::string>& target, Value v) {
    if (target.size() == 1) {
      if (is_builtin(target[0])) fail("cannot rebind builtin '" + target[0] + "'");
      names_[target[0]] = std::move(v);
      return;
    }
    auto it = names_.find(target[0]);
    if (it == names_.end()) fail("name '" + target[0] + "' is not defined");
    std::string path = target[0];
    for (size_t k = 1; k < target.size(); ++k) path += "." + target[k];
    try {
      ConfigTree tmp(Dict{{target[0], it->second}});
      it->second = tmp.with(path, std::move(v)).root().at(target[0]);
    } catch (const BadKeyPath& e) {
      fail(e.what());
    }
  }

  static bool is_builtin(const std::string& n) {
    return n == "L" || n == "dict" || n == "True" || n == "False" || n == "None";
  }

  Value to_value(const Eval& e) const {
    if (e.kind != Eval::Kind::kValue) fail("a callable cannot be used as a value");
    return e.value;
  }

  Eval expr() {
    Eval lhs = term();
    while (is_op("+") || is_op("-")) {
      const char op = toks_[i_++].text[0];
      Eval rhs = term();
      lhs = wrap(binary(op, to_value(lhs), to_value(rhs)));
    }
    return lhs;
  }

  Eval term() {
    Eval lhs = unary();
    while (is_op("*") || is_op("/")) {
      const char op = toks_[i_++].text[0];
      Eval rhs = unary();
      lhs = wrap(binary(op, to_value(lhs), to_value(rhs)));
    }
    return lhs;
  }

  Eval unary() {
    if (accept_op("-")) {
      Value v = to_value(unary());
      if (v.kind() == Value::Kind::kInt) return wrap(Value(-v.as_int()));
      if (v.kind() == Value::Kind::kFloat) return wrap(Value(-v.as_number()));
      fail(std::string("bad operand for unary '-': ") + v.kind_name());
    }
    if (accept_op("+")) return unary();
    return postfix();
  }

  static Eval wrap(Value v) { return Eval{Eval::Kind::kValue, std::move(v), {}}; }

  Value binary(char op, const Value& a, const Value& b) const {
    using K = Value::Kind;
    if (a.is_number() && b.is_number()) {
      if (op == '/') {
        if (b.as_number() == 0.0) fail("division by zero");
        return Value(a.as_number() / b.as_number());
      }
      if (a.kind() == K::kInt && b.kind() == K::kInt) {
        const int64_t x = a.as_int(), y = b.as_int();
        return Value(op == '+' ? x + y : op == '-' ? x - y : x * y);
      }
      const double x = a.as_number(), y = b.as_number();
      return Value(op == '+' ? x + y : op == '-' ? x - y : x * y);
    }
    if (op == '+' && a.kind() == K::kString && b.kind() == K::kString) return Value(a.as_string() + b.as_string());
    if (op == '+' && a.kind() == K::kList && b.kind() == K::kList) {
      List out = a.as_list();
      out.insert(out.end(), b.as_list().begin(), b.as_list().end());
      return Value(std::move(out));
    }
    fail(std::string("unsupported operands for '") + op + "': " + a.kind_name() + " and " + b.kind_name());
  }

  Eval postfix() {
    Eval cur = primary();
    while (true) {
      if (accept_op("(")) {
        cur = call(cur);
      } else if (is_op(".")) {
        ++i_;
        const std::string attr = expect_kind(TokKind::kName, "attribute name").text;
        const Value v = to_value(cur);
        const Value* child = v.child(attr);
        if (!child) fail("no attribute '" + attr + "' on " + v.kind_name());
        cur = wrap(*child);
      } else if (accept_op("[")) {
        const Value v = to_value(cur);
        const Value key = to_value(expr());
        expect_op("]");
        if (v.kind() == Value::Kind::kList && key.kind() == Value::Kind::kInt) {
          int64_t idx = key.as_int();
          const auto n = static_cast<int64_t>(v.as_list().size());
          if (idx < 0) idx += n;
          if (idx < 0 || idx >= n) fail("list index out of range");
          cur = wrap(v.as_list()[static_cast<size_t>(idx)]);
        } else if (v.is_mapping() && key.kind() == Value::Kind::kString) {
          const Value* child = v.child(key.as_string());
          if (!child) fail("no key '" + key.as_string() + "'");
          cur = wrap(*child);
        } else {
          fail(std::string("cannot subscript ") + v.kind_name() + " with " + key.kind_name());
        }
      } else {
        return cur;
      }
    }
  }

  Eval call(const Eval& callee) {
    if (literal_) fail("calls are not allowed in literals");
    std::vector<Value> positional;
    Dict keywords;
    if (!accept_op(")")) {
      while (true) {
        if (peek().kind == TokKind::kName && toks_[i_ + 1].kind == TokKind::kOp && toks_[i_ + 1].text == "=") {
          const std::string key = toks_[i_].text;
          i_ += 2;
          if (keywords.count(key)) fail("duplicate keyword argument '" + key + "'");
          keywords[key] = to_value(expr());
        } else {
          if (!keywords.empty()) fail("positional argument after keyword argument");
          positional.push_back(to_value(expr()));
        }
        if (accept_op(")")) break;
        expect_op(",");
        if (accept_op(")")) break;
      }
    }
    switch (callee.kind) {
      case Eval::Kind::kBuiltinL:
        if (positional.size() != 1 || positional[0].kind() != Value::Kind::kString || !keywords.empty())
          fail("L() takes exactly one target string");
        if (positional[0].as_string().empty()) fail("L() target must not be empty");
        return Eval{Eval::Kind::kLazyCallable, Value(), positional[0].as_string()};
      case Eval::Kind::kLazyCallable:
        if (!positional.empty()) fail("lazy calls take keyword arguments only");
        return wrap(Value(LazySpec{callee.target, std::move(keywords)}));
      case Eval::Kind::kBuiltinDict:
        if (!positional.empty()) fail("dict() takes keyword arguments only");
        return wrap(Value(std::move(keywords)));
      case Eval::Kind::kValue: fail("value is not callable");
    }
    fail("bad call");
  }

  Eval primary() {
    const Token& t = peek();
    switch (t.kind) {
      case TokKind::kInt: ++i_; return wrap(Value(t.int_value));
      case TokKind::kFloat: ++i_; return wrap(Value(t.float_value));
      case TokKind::kString: ++i_; return wrap(Value(t.text));
      case TokKind::kName: {
        ++i_;
        if (t.text == "True") return wrap(Value(true));
        if (t.text == "False") return wrap(Value(false));
        if (t.text == "None") return wrap(Value());
        if (literal_) fail("bare name '" + t.text + "' in literal");
        if (t.text == "L") return Eval{Eval::Kind::kBuiltinL, Value(), {}};
        if (t.text == "dict") return Eval{Eval::Kind::kBuiltinDict, Value(), {}};
        auto it = names_.find(t.text);
        if (it == names_.end()) fail("name '" + t.text + "' is not defined");
        return wrap(it->second);
      }
      case TokKind::kOp:
        if (t.text == "(") {
          ++i_;
          Eval e = expr();
          expect_op(")");
          return e;
        }
        if (t.text == "[") {
          ++i_;
          List items;
          while (!accept_op("]")) {
            items.push_back(to_value(expr()));
            if (accept_op("]")) break;
            expect_op(",");
          }
          return wrap(Value(std::move(items)));
        }
        if (t.text == "{") {
          ++i_;
          Dict items;
          while (!accept_op("}")) {
            const Value key = to_value(expr());
            if (key.kind() != Value::Kind::kString) fail("dict keys must be strings");
            expect_op(":");
            items[key.as_string()] = to_value(expr());
            if (accept_op("}")) break;
            expect_op(",");
          }
          return wrap(Value(std::move(items)));
        }
        break;
      default: break;
    }
    fail("unexpected '" + t.text + "'");
  }

  std::vector<Token> toks_;
  size_t i_ = 0;
  std::string origin_;
  std::filesystem::path base_dir_;
  LoadContext* ctx_;
  bool literal_;
  std::map<std::string, Value> names_;
};

ConfigTree evaluate(std::string_view source, const std::string& origin, const std::filesystem::path& base_dir,
                    LoadContext& ctx) {
  Lexer lexer(source, origin);
  Interpreter interp(lexer.run(), origin, base_dir, &ctx, false);
  ConfigTree tree(interp.run_program());
  if (tree.root().empty()) throw EmptyConfig(origin + " defines no top-level names");
  return tree;
}

ConfigTree load_file(const std::filesystem::path& path, LoadContext& ctx) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw FileMissing(path.string());
  const auto canonical = std::filesystem::weakly_canonical(path);
  for (const auto& p : ctx.stack)
    if (p == canonical) throw EvaluationError("import cycle through " + path.string());
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissing(path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  ctx.stack.push_back(canonical);
  ConfigTree tree = evaluate(ss.str(), path.string(), path.parent_path(), ctx);
  ctx.stack.pop_back();
  return tree;
}

}  // namespace

ConfigTree load_config(const std::filesystem::path& path) {
  LoadContext ctx;
  return load_file(path, ctx);
}

ConfigTree load_config_string(std::string_view source, const std::filesystem::path& origin) {
  LoadContext ctx;
  const auto base = std::filesystem::is_directory(origin) ? origin : origin.parent_path();
  return evaluate(source, "<string>", base, ctx);
}

Value parse_override_value(std::string_view text) {
  try {
    Lexer lexer(text, "<override>");
    Interpreter interp(lexer.run(), "<override>", ".", nullptr, true);
    return interp.run_expression();
  } catch (const EvaluationError&) {
    // lowercase spellings are accepted for shell convenience
    if (text == "true") return Value(true);
    if (text == "false") return Value(false);
    if (text == "none" || text == "null") return Value();
    return Value(std::string(text));
  }
}

ConfigTree apply_overrides(const ConfigTree& tree, const std::vector<std::string>& overrides) {
  ConfigTree out = tree;
  for (const auto& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ParseError("override '" + ov + "' is not of the form key=value");
    const std::string key = ov.substr(0, eq);
    for (char c : key)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'))
        throw ParseError("override key '" + key + "' contains '" + std::string(1, c) + "'");
    out = out.with(key, parse_override_value(std::string_view(ov).substr(eq + 1)));
  }
  return out;
}

}  // namespace detkit::config
