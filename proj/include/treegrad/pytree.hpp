#pragma once

// PyTrees: nested containers (sequence, tuple, string-keyed mapping,
// registered nodes) over a closed set of leaf kinds. Trees are immutable
// values; flatten/unflatten round-trips exactly and mapping keys are kept in
// ascending byte order, so equal trees always flatten the same way.

#include <atomic>
#include <cctype>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "tensor.hpp"

namespace treegrad {

struct FunctionRef {
  std::string name;
  bool operator==(const FunctionRef& o) const { return name == o.name; }
  bool operator!=(const FunctionRef& o) const { return name != o.name; }
};

// Identity token; equal only to itself (and copies of itself).
struct Opaque {
  std::uint64_t token = 0;
  static Opaque fresh() {
    static std::atomic<std::uint64_t> next{1};
    return Opaque{next.fetch_add(1)};
  }
  bool operator==(const Opaque& o) const { return token == o.token; }
};

// Structural placeholder; all sentinels compare equal.
struct Sentinel {
  bool operator==(const Sentinel&) const { return true; }
};

// Symbolic stand-in for a tensor inside an active trace.
struct Tracer {
  std::uint64_t ctx = 0;  // owning trace context
  int level = 0;
  std::int32_t var = -1;  // graph variable
  TensorSpec spec;
};

namespace detail {

inline bool is_bare_ident(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  return true;
}

inline void append_quoted(std::string& out, std::string_view s) {
  out += '"';
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '"': out += "\\\""; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof(buf), "\\x%02x", static_cast<unsigned char>(c));
          out += buf;
        } else {
          out += c;
        }
    }
  }
  out += '"';
}

// Cursor over canonical text; shared by the static-value and fingerprint parsers.
struct TextCursor {
  std::string_view s;
  std::size_t pos = 0;
  const char* what;  // error prefix, e.g. "static" or "fingerprint"

  bool done() const { return pos >= s.size(); }
  char peek() const { return pos < s.size() ? s[pos] : '\0'; }
  char take() {
    if (done()) fail("unexpected end of input");
    return s[pos++];
  }
  void expect(char c) {
    if (done() || s[pos] != c)
      fail(std::string("expected '") + c + "' at offset " + std::to_string(pos));
    ++pos;
  }
  bool try_take(std::string_view lit) {
    if (s.substr(pos, lit.size()) == lit) {
      pos += lit.size();
      return true;
    }
    return false;
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw std::invalid_argument(std::string("[") + what + "] " + msg + " in \"" + std::string(s) + "\"");
  }

  std::string take_quoted() {
    expect('"');
    std::string out;
    while (true) {
      char c = take();
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      char e = take();
      switch (e) {
        case '\\': out += '\\'; break;
        case '"': out += '"'; break;
        case 'n': out += '\n'; break;
        case 'r': out += '\r'; break;
        case 't': out += '\t'; break;
        case 'x': {
          auto hex = [this](char h) -> int {
            if (h >= '0' && h <= '9') return h - '0';
            if (h >= 'a' && h <= 'f') return h - 'a' + 10;
            if (h >= 'A' && h <= 'F') return h - 'A' + 10;
            fail("invalid hex escape");
          };
          int hi = hex(take());
          int lo = hex(take());
          out += static_cast<char>(hi * 16 + lo);
          break;
        }
        default: fail("invalid escape sequence");
      }
    }
  }

  std::string take_ident() {
    std::size_t start = pos;
    while (!done() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_')) ++pos;
    if (pos == start) fail("expected identifier at offset " + std::to_string(start));
    return std::string(s.substr(start, pos - start));
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// StaticValue: structured non-tensor data carried by registered nodes.
// Canonical text form round-trips through parse().
// ---------------------------------------------------------------------------

class StaticValue {
 public:
  using List = std::vector<StaticValue>;
  using Fields = std::vector<std::pair<std::string, StaticValue>>;

  StaticValue() : v_(std::monostate{}) {}

  static StaticValue none() { return StaticValue(); }
  static StaticValue of(bool b) { return StaticValue(V(b)); }
  static StaticValue of_int(std::int64_t i) { return StaticValue(V(i)); }
  static StaticValue of_float(double d) { return StaticValue(V(d)); }
  static StaticValue of_string(std::string s) { return StaticValue(V(std::move(s))); }
  static StaticValue of(FunctionRef f) { return StaticValue(V(std::move(f))); }
  static StaticValue of(Opaque o) { return StaticValue(V(o)); }
  static StaticValue list(List items) { return StaticValue(V(std::move(items))); }
  static StaticValue fields(Fields fs) {
    for (std::size_t i = 0; i < fs.size(); ++i)
      for (std::size_t j = i + 1; j < fs.size(); ++j)
        if (fs[i].first == fs[j].first)
          throw std::invalid_argument("[static] duplicate field key '" + fs[i].first + "'");
    return StaticValue(V(std::move(fs)));
  }

  bool is_none() const { return std::holds_alternative<std::monostate>(v_); }
  bool is_bool() const { return std::holds_alternative<bool>(v_); }
  bool is_int() const { return std::holds_alternative<std::int64_t>(v_); }
  bool is_float() const { return std::holds_alternative<double>(v_); }
  bool is_string() const { return std::holds_alternative<std::string>(v_); }
  bool is_function() const { return std::holds_alternative<FunctionRef>(v_); }
  bool is_opaque() const { return std::holds_alternative<Opaque>(v_); }
  bool is_list() const { return std::holds_alternative<List>(v_); }
  bool is_fields() const { return std::holds_alternative<Fields>(v_); }

  bool as_bool() const { return get<bool>("bool"); }
  std::int64_t as_int() const { return get<std::int64_t>("int"); }
  double as_float() const { return get<double>("float"); }
  const std::string& as_string() const { return get<std::string>("string"); }
  const FunctionRef& as_function() const { return get<FunctionRef>("function"); }
  Opaque as_opaque() const { return get<Opaque>("opaque"); }
  const List& as_list() const { return get<List>("list"); }
  const Fields& as_fields() const { return get<Fields>("fields"); }

  const StaticValue* field(std::string_view key) const {
    for (const auto& [k, v] : as_fields())
      if (k == key) return &v;
    return nullptr;
  }

  bool operator==(const StaticValue& o) const {
    if (v_.index() != o.v_.index()) return false;
    if (is_float())
      return std::bit_cast<std::uint64_t>(as_float()) == std::bit_cast<std::uint64_t>(o.as_float());
    return v_ == o.v_;
  }
  bool operator!=(const StaticValue& o) const { return !(*this == o); }

  std::string render() const {
    std::string out;
    render_to(out);
    return out;
  }

  static StaticValue parse(std::string_view text) {
    detail::TextCursor cur{text, 0, "static"};
    StaticValue v = parse_value(cur);
    if (!cur.done()) cur.fail("trailing characters at offset " + std::to_string(cur.pos));
    return v;
  }

  void render_to(std::string& out) const {
    if (is_none()) {
      out += "none";
    } else if (is_bool()) {
      out += as_bool() ? "true" : "false";
    } else if (is_int()) {
      out += std::to_string(as_int());
    } else if (is_float()) {
      std::string s = fmt_double(as_float());
      if (s.find_first_of(".eni") == std::string::npos) s += ".0";
      out += s;
    } else if (is_string()) {
      detail::append_quoted(out, as_string());
    } else if (is_function()) {
      out += "fn<" + as_function().name + ">";
    } else if (is_opaque()) {
      out += "opaque<" + std::to_string(as_opaque().token) + ">";
    } else if (is_list()) {
      out += '[';
      const List& xs = as_list();
      for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i].render_to(out);
        if (i + 1 < xs.size()) out += ',';
      }
      out += ']';
    } else {
      out += '{';
      const Fields& fs = as_fields();
      for (std::size_t i = 0; i < fs.size(); ++i) {
        if (detail::is_bare_ident(fs[i].first))
          out += fs[i].first;
        else
          detail::append_quoted(out, fs[i].first);
        out += '=';
        fs[i].second.render_to(out);
        if (i + 1 < fs.size()) out += ',';
      }
      out += '}';
    }
  }

  static StaticValue parse_value(detail::TextCursor& cur) {
    char c = cur.peek();
    if (cur.try_take("none")) return none();
    if (cur.try_take("true")) return of(true);
    if (cur.try_take("false")) return of(false);
    if (cur.try_take("fn<")) {
      std::size_t start = cur.pos;
      while (!cur.done() && cur.peek() != '>') ++cur.pos;
      std::string name(cur.s.substr(start, cur.pos - start));
      cur.expect('>');
      if (name.empty()) cur.fail("empty function name");
      return of(FunctionRef{std::move(name)});
    }
    if (cur.try_take("opaque<")) {
      std::uint64_t tok = 0;
      std::size_t start = cur.pos;
      while (!cur.done() && std::isdigit(static_cast<unsigned char>(cur.peek()))) {
        tok = tok * 10 + static_cast<std::uint64_t>(cur.take() - '0');
      }
      if (cur.pos == start) cur.fail("expected opaque token");
      cur.expect('>');
      return of(Opaque{tok});
    }
    if (c == '"') return of_string(cur.take_quoted());
    if (c == '[') {
      cur.take();
      List items;
      if (cur.peek() == ']') {
        cur.take();
        return list(std::move(items));
      }
      while (true) {
        items.push_back(parse_value(cur));
        char d = cur.take();
        if (d == ']') return list(std::move(items));
        if (d != ',') cur.fail("expected ',' or ']' in list");
      }
    }
    if (c == '{') {
      cur.take();
      Fields fs;
      if (cur.peek() == '}') {
        cur.take();
        return fields(std::move(fs));
      }
      while (true) {
        std::string key = cur.peek() == '"' ? cur.take_quoted() : cur.take_ident();
        cur.expect('=');
        fs.emplace_back(std::move(key), parse_value(cur));
        char d = cur.take();
        if (d == '}') return fields(std::move(fs));
        if (d != ',') cur.fail("expected ',' or '}' in fields");
      }
    }
    // number: int unless it carries a float marker
    std::size_t start = cur.pos;
    if (cur.peek() == '-') cur.take();
    if (cur.try_take("inf")) return of_float(cur.s[start] == '-' ? -INFINITY : INFINITY);
    if (cur.try_take("nan")) return of_float(NAN);
    bool is_float = false;
    while (!cur.done()) {
      char d = cur.peek();
      if (std::isdigit(static_cast<unsigned char>(d))) {
        cur.take();
      } else if (d == '.' || d == 'e' || d == 'E' || d == '+' ||
                 (d == '-' && (cur.s[cur.pos - 1] == 'e' || cur.s[cur.pos - 1] == 'E'))) {
        is_float = true;
        cur.take();
      } else {
        break;
      }
    }
    std::string_view num = cur.s.substr(start, cur.pos - start);
    if (num.empty() || num == "-") cur.fail("expected a value at offset " + std::to_string(start));
    if (is_float) {
      double d = 0;
      auto r = std::from_chars(num.data(), num.data() + num.size(), d);
      if (r.ec != std::errc{} || r.ptr != num.data() + num.size()) cur.fail("invalid float literal");
      return of_float(d);
    }
    std::int64_t i = 0;
    auto r = std::from_chars(num.data(), num.data() + num.size(), i);
    if (r.ec != std::errc{} || r.ptr != num.data() + num.size()) cur.fail("invalid int literal");
    return of_int(i);
  }

 private:
  using V = std::variant<std::monostate, bool, std::int64_t, double, std::string, FunctionRef, Opaque, List, Fields>;
  explicit StaticValue(V v) : v_(std::move(v)) {}
  template <class T>
  const T& get(const char* what) const {
    if (!std::holds_alternative<T>(v_))
      throw std::invalid_argument(std::string("[static] value is not a ") + what);
    return std::get<T>(v_);
  }
  V v_;
};

// ---------------------------------------------------------------------------
// Leaf
// ---------------------------------------------------------------------------

class Leaf {
 public:
  static Leaf tensor(Tensor t) { return Leaf(V(std::move(t))); }
  static Leaf scalar_int(std::int64_t i) { return Leaf(V(i)); }
  static Leaf scalar_float(double d) { return Leaf(V(d)); }
  static Leaf scalar_bool(bool b) { return Leaf(V(b)); }
  static Leaf function(FunctionRef f) { return Leaf(V(std::move(f))); }
  static Leaf opaque(Opaque o) { return Leaf(V(o)); }
  static Leaf sentinel() { return Leaf(V(Sentinel{})); }
  static Leaf tracer(Tracer t) { return Leaf(V(std::move(t))); }

  bool is_tensor() const { return std::holds_alternative<Tensor>(v_); }
  bool is_scalar_int() const { return std::holds_alternative<std::int64_t>(v_); }
  bool is_scalar_float() const { return std::holds_alternative<double>(v_); }
  bool is_scalar_bool() const { return std::holds_alternative<bool>(v_); }
  bool is_function() const { return std::holds_alternative<FunctionRef>(v_); }
  bool is_opaque() const { return std::holds_alternative<Opaque>(v_); }
  bool is_sentinel() const { return std::holds_alternative<Sentinel>(v_); }
  bool is_tracer() const { return std::holds_alternative<Tracer>(v_); }

  // tensor or tracer: a value the numeric ops accept
  bool is_tensorish() const { return is_tensor() || is_tracer(); }

  const Tensor& tensor() const { return get<Tensor>("tensor"); }
  std::int64_t scalar_int_value() const { return get<std::int64_t>("scalar int"); }
  double scalar_float_value() const { return get<double>("scalar float"); }
  bool scalar_bool_value() const { return get<bool>("scalar bool"); }
  const FunctionRef& function_ref() const { return get<FunctionRef>("function"); }
  Opaque opaque_value() const { return get<Opaque>("opaque"); }
  const Tracer& tracer_value() const { return get<Tracer>("traced tensor"); }

  const char* kind_name() const {
    switch (v_.index()) {
      case 0: return "tensor";
      case 1: return "scalar int";
      case 2: return "scalar float";
      case 3: return "scalar bool";
      case 4: return "function";
      case 5: return "opaque";
      case 6: return "sentinel";
      default: return "traced tensor";
    }
  }

  // Value identity text used in cache keys; tensors by spec only.
  std::string signature() const {
    switch (v_.index()) {
      case 0: return tensor().spec().str();
      case 1: return "int " + std::to_string(scalar_int_value());
      case 2: {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "flt %016llx",
                      static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(scalar_float_value())));
        return buf;
      }
      case 3: return scalar_bool_value() ? "bool true" : "bool false";
      case 4: return "fn " + function_ref().name;
      case 5: return "opq " + std::to_string(opaque_value().token);
      case 6: return "sent";
      default: return "tr " + tracer_value().spec.str();
    }
  }

 private:
  using V = std::variant<Tensor, std::int64_t, double, bool, FunctionRef, Opaque, Sentinel, Tracer>;
  explicit Leaf(V v) : v_(std::move(v)) {}
  template <class T>
  const T& get(const char* what) const {
    if (!std::holds_alternative<T>(v_))
      throw std::invalid_argument(std::string("[leaf] expected a ") + what + ", got " + kind_name());
    return std::get<T>(v_);
  }
  V v_;
};

inline TensorSpec leaf_spec(const Leaf& l) {
  if (l.is_tensor()) return l.tensor().spec();
  if (l.is_tracer()) return l.tracer_value().spec;
  throw std::invalid_argument(std::string("[leaf] ") + l.kind_name() + " has no tensor shape");
}

inline bool leaf_equal(const Leaf& a, const Leaf& b) {
  if (a.is_tensor() && b.is_tensor()) return a.tensor().bitwise_equal(b.tensor());
  if (a.is_scalar_int() && b.is_scalar_int()) return a.scalar_int_value() == b.scalar_int_value();
  if (a.is_scalar_float() && b.is_scalar_float())
    return std::bit_cast<std::uint64_t>(a.scalar_float_value()) ==
           std::bit_cast<std::uint64_t>(b.scalar_float_value());
  if (a.is_scalar_bool() && b.is_scalar_bool()) return a.scalar_bool_value() == b.scalar_bool_value();
  if (a.is_function() && b.is_function()) return a.function_ref() == b.function_ref();
  if (a.is_opaque() && b.is_opaque()) return a.opaque_value() == b.opaque_value();
  if (a.is_sentinel() && b.is_sentinel()) return true;
  if (a.is_tracer() && b.is_tracer())
    return a.tracer_value().ctx == b.tracer_value().ctx && a.tracer_value().var == b.tracer_value().var;
  return false;
}

// ---------------------------------------------------------------------------
// Tree structure
// ---------------------------------------------------------------------------

enum class NodeKind { Leaf, Seq, Tup, Map, Reg };

class PyTree;
using TreeFn = std::function<PyTree(std::span<const PyTree>)>;

namespace detail {

struct Skeleton {
  NodeKind kind = NodeKind::Leaf;
  std::vector<Skeleton> children;
  std::vector<std::string> keys;        // Map
  std::string tag;                      // Reg
  StaticValue payload;                  // Reg
  std::vector<std::string> child_names; // Reg, advisory (not part of the text form)
  std::size_t leaf_count = 1;

  void render_to(std::string& out) const {
    switch (kind) {
      case NodeKind::Leaf: out += '*'; return;
      case NodeKind::Seq: {
        out += "Seq[";
        for (std::size_t i = 0; i < children.size(); ++i) {
          children[i].render_to(out);
          if (i + 1 < children.size()) out += ',';
        }
        out += ']';
        return;
      }
      case NodeKind::Tup: {
        out += "Tup(";
        for (std::size_t i = 0; i < children.size(); ++i) {
          children[i].render_to(out);
          if (i + 1 < children.size()) out += ',';
        }
        out += ')';
        return;
      }
      case NodeKind::Map: {
        out += "Map{";
        for (std::size_t i = 0; i < children.size(); ++i) {
          if (is_bare_ident(keys[i]))
            out += keys[i];
          else
            append_quoted(out, keys[i]);
          out += ':';
          children[i].render_to(out);
          if (i + 1 < children.size()) out += ',';
        }
        out += '}';
        return;
      }
      case NodeKind::Reg: {
        out += "Reg<" + tag + ";";
        payload.render_to(out);
        out += ">(";
        for (std::size_t i = 0; i < children.size(); ++i) {
          children[i].render_to(out);
          if (i + 1 < children.size()) out += ',';
        }
        out += ')';
        return;
      }
    }
  }
};

inline Skeleton parse_skeleton(TextCursor& cur) {
  Skeleton sk;
  auto parse_children = [&cur](Skeleton& out, char close) {
    out.leaf_count = 0;
    if (cur.peek() == close) {
      cur.take();
      return;
    }
    while (true) {
      out.children.push_back(parse_skeleton(cur));
      out.leaf_count += out.children.back().leaf_count;
      char d = cur.take();
      if (d == close) return;
      if (d != ',') cur.fail(std::string("expected ',' or '") + close + "'");
    }
  };
  if (cur.try_take("*")) return sk;
  if (cur.try_take("Seq[")) {
    sk.kind = NodeKind::Seq;
    parse_children(sk, ']');
    return sk;
  }
  if (cur.try_take("Tup(")) {
    sk.kind = NodeKind::Tup;
    parse_children(sk, ')');
    return sk;
  }
  if (cur.try_take("Map{")) {
    sk.kind = NodeKind::Map;
    sk.leaf_count = 0;
    if (cur.peek() == '}') {
      cur.take();
      return sk;
    }
    while (true) {
      std::string key = cur.peek() == '"' ? cur.take_quoted() : cur.take_ident();
      cur.expect(':');
      sk.keys.push_back(std::move(key));
      sk.children.push_back(parse_skeleton(cur));
      sk.leaf_count += sk.children.back().leaf_count;
      char d = cur.take();
      if (d == '}') break;
      if (d != ',') cur.fail("expected ',' or '}' in Map");
    }
    for (std::size_t i = 0; i + 1 < sk.keys.size(); ++i)
      if (!(sk.keys[i] < sk.keys[i + 1])) cur.fail("Map keys must be unique and ascending");
    return sk;
  }
  if (cur.try_take("Reg<")) {
    sk.kind = NodeKind::Reg;
    std::size_t start = cur.pos;
    while (!cur.done() && cur.peek() != ';') ++cur.pos;
    sk.tag = std::string(cur.s.substr(start, cur.pos - start));
    if (sk.tag.empty()) cur.fail("empty node tag");
    cur.expect(';');
    sk.payload = StaticValue::parse_value(cur);
    cur.expect('>');
    cur.expect('(');
    parse_children(sk, ')');
    return sk;
  }
  cur.fail("expected '*', 'Seq[', 'Tup(', 'Map{' or 'Reg<' at offset " + std::to_string(cur.pos));
}

}  // namespace detail

// Canonical description of a tree's shape: container nesting, mapping keys,
// node tags and payloads. Leaf kinds are not part of the fingerprint.
class StructureFingerprint {
 public:
  explicit StructureFingerprint(detail::Skeleton sk)
      : skel_(std::make_shared<const detail::Skeleton>(std::move(sk))) {
    skel_->render_to(text_);
  }

  static StructureFingerprint parse(std::string_view text) {
    detail::TextCursor cur{text, 0, "fingerprint"};
    detail::Skeleton sk = detail::parse_skeleton(cur);
    if (!cur.done()) cur.fail("trailing characters at offset " + std::to_string(cur.pos));
    return StructureFingerprint(std::move(sk));
  }

  const std::string& text() const { return text_; }
  std::size_t leaf_count() const { return skel_->leaf_count; }
  const detail::Skeleton& skeleton() const { return *skel_; }

  bool operator==(const StructureFingerprint& o) const { return text_ == o.text_; }
  bool operator!=(const StructureFingerprint& o) const { return text_ != o.text_; }

 private:
  std::shared_ptr<const detail::Skeleton> skel_;
  std::string text_;
};

class PyTree {
 public:
  static PyTree leaf(Leaf v) { return PyTree(LeafRep{std::move(v)}); }
  static PyTree tensor(Tensor t) { return leaf(Leaf::tensor(std::move(t))); }
  static PyTree scalar_int(std::int64_t i) { return leaf(Leaf::scalar_int(i)); }
  static PyTree scalar_float(double d) { return leaf(Leaf::scalar_float(d)); }
  static PyTree scalar_bool(bool b) { return leaf(Leaf::scalar_bool(b)); }
  static PyTree function(FunctionRef f) { return leaf(Leaf::function(std::move(f))); }
  static PyTree opaque(Opaque o) { return leaf(Leaf::opaque(o)); }
  static PyTree sentinel() { return leaf(Leaf::sentinel()); }

  static PyTree seq(std::vector<PyTree> children) { return PyTree(SeqRep{std::move(children)}); }
  static PyTree tup(std::vector<PyTree> children) { return PyTree(TupRep{std::move(children)}); }

  // Entries are sorted by key; duplicate keys are rejected.
  static PyTree map(std::vector<std::pair<std::string, PyTree>> entries) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i + 1 < entries.size(); ++i)
      if (entries[i].first == entries[i + 1].first)
        throw std::invalid_argument("[pytree] duplicate mapping key '" + entries[i].first + "'");
    MapRep rep;
    for (auto& [k, v] : entries) {
      rep.keys.push_back(std::move(k));
      rep.children.push_back(std::move(v));
    }
    return PyTree(std::move(rep));
  }

  static PyTree registered(std::string tag, StaticValue payload, std::vector<PyTree> children,
                           std::vector<std::string> child_names = {});

  // Unregistered tags collapse to a fresh opaque leaf instead of a node.
  static PyTree record(const std::string& tag, StaticValue payload, std::vector<PyTree> children);

  NodeKind kind() const { return static_cast<NodeKind>(rep_.index()); }

  const Leaf& leaf_value() const {
    if (kind() != NodeKind::Leaf) throw std::invalid_argument("[pytree] node is not a leaf");
    return std::get<LeafRep>(rep_).v;
  }
  std::span<const PyTree> children() const {
    switch (kind()) {
      case NodeKind::Leaf: throw std::invalid_argument("[pytree] leaf has no children");
      case NodeKind::Seq: return std::get<SeqRep>(rep_).children;
      case NodeKind::Tup: return std::get<TupRep>(rep_).children;
      case NodeKind::Map: return std::get<MapRep>(rep_).children;
      case NodeKind::Reg: return std::get<RegRep>(rep_).children;
    }
    throw std::logic_error("unreachable");
  }
  const std::vector<std::string>& map_keys() const {
    if (kind() != NodeKind::Map) throw std::invalid_argument("[pytree] node is not a mapping");
    return std::get<MapRep>(rep_).keys;
  }
  const PyTree& map_at(std::string_view key) const {
    const auto& rep = std::get<MapRep>(rep_);
    for (std::size_t i = 0; i < rep.keys.size(); ++i)
      if (rep.keys[i] == key) return rep.children[i];
    throw std::invalid_argument("[pytree] no mapping key '" + std::string(key) + "'");
  }
  const std::string& reg_tag() const { return reg().tag; }
  const StaticValue& reg_payload() const { return reg().payload; }
  const std::vector<std::string>& reg_child_names() const { return reg().child_names; }

 private:
  struct LeafRep {
    Leaf v;
  };
  struct SeqRep {
    std::vector<PyTree> children;
  };
  struct TupRep {
    std::vector<PyTree> children;
  };
  struct MapRep {
    std::vector<std::string> keys;
    std::vector<PyTree> children;
  };
  struct RegRep {
    std::string tag;
    StaticValue payload;
    std::vector<PyTree> children;
    std::vector<std::string> child_names;
  };
  using Rep = std::variant<LeafRep, SeqRep, TupRep, MapRep, RegRep>;

  explicit PyTree(Rep rep) : rep_(std::move(rep)) {}
  const RegRep& reg() const {
    if (kind() != NodeKind::Reg) throw std::invalid_argument("[pytree] node is not a registered node");
    return std::get<RegRep>(rep_);
  }

  Rep rep_;
};

// ---------------------------------------------------------------------------
// Registry of node kinds
// ---------------------------------------------------------------------------

struct NodeRegistration {
  std::string tag;
  // tree -> (payload, children); inverse pair, from(to(v)) must equal v
  std::function<std::pair<StaticValue, std::vector<PyTree>>(const PyTree&)> to_children;
  std::function<PyTree(const StaticValue&, std::vector<PyTree>)> from_children;
};

namespace detail {

inline bool valid_tag(std::string_view tag) {
  if (tag.empty()) return false;
  for (char c : tag)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return true;
}

struct NodeRegistry {
  std::mutex m;
  std::map<std::string, NodeRegistration, std::less<>> kinds;
};

inline NodeRegistry& node_registry() {
  static NodeRegistry r;
  return r;
}

}  // namespace detail

inline bool node_kind_registered(std::string_view tag) {
  auto& r = detail::node_registry();
  std::lock_guard lock(r.m);
  return r.kinds.find(tag) != r.kinds.end();
}

inline void register_node_kind(NodeRegistration reg) {
  if (!detail::valid_tag(reg.tag))
    throw std::invalid_argument("[pytree] invalid node tag '" + reg.tag + "'");
  std::string tag = reg.tag;
  if (!reg.to_children)
    reg.to_children = [](const PyTree& t) {
      return std::make_pair(t.reg_payload(), std::vector<PyTree>(t.children().begin(), t.children().end()));
    };
  if (!reg.from_children)
    reg.from_children = [tag](const StaticValue& payload, std::vector<PyTree> children) {
      return PyTree::registered(tag, payload, std::move(children));
    };
  auto& r = detail::node_registry();
  std::lock_guard lock(r.m);
  if (r.kinds.find(tag) != r.kinds.end())
    throw std::invalid_argument("[pytree] node kind '" + tag + "' is already registered");
  r.kinds.emplace(std::move(tag), std::move(reg));
}

inline NodeRegistration node_kind(std::string_view tag) {
  auto& r = detail::node_registry();
  std::lock_guard lock(r.m);
  auto it = r.kinds.find(tag);
  if (it == r.kinds.end())
    throw std::invalid_argument("[pytree] node kind '" + std::string(tag) + "' is not registered");
  return it->second;
}

inline PyTree PyTree::registered(std::string tag, StaticValue payload, std::vector<PyTree> children,
                                 std::vector<std::string> child_names) {
  if (!node_kind_registered(tag))
    throw std::invalid_argument("[pytree] node kind '" + tag + "' is not registered");
  if (!child_names.empty() && child_names.size() != children.size())
    throw std::invalid_argument("[pytree] child name count does not match child count");
  return PyTree(RegRep{std::move(tag), std::move(payload), std::move(children), std::move(child_names)});
}

inline PyTree PyTree::record(const std::string& tag, StaticValue payload, std::vector<PyTree> children) {
  if (node_kind_registered(tag)) return registered(tag, std::move(payload), std::move(children));
  return opaque(Opaque::fresh());
}

// ---------------------------------------------------------------------------
// Registry of named functions
// ---------------------------------------------------------------------------

namespace detail {

inline bool valid_function_name(std::string_view name) {
  if (name.empty()) return false;
  for (char c : name)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == ':' || c == '/' ||
          c == '-'))
      return false;
  return true;
}

struct FnRegistry {
  std::mutex m;
  std::map<std::string, TreeFn, std::less<>> fns;
};

inline FnRegistry& fn_registry() {
  static FnRegistry r;
  return r;
}

}  // namespace detail

inline FunctionRef register_function(std::string name, TreeFn fn) {
  if (!detail::valid_function_name(name))
    throw std::invalid_argument("[pytree] invalid function name '" + name + "'");
  if (!fn) throw std::invalid_argument("[pytree] null function for '" + name + "'");
  auto& r = detail::fn_registry();
  std::lock_guard lock(r.m);
  if (!r.fns.emplace(name, std::move(fn)).second)
    throw std::invalid_argument("[pytree] function '" + name + "' is already registered");
  return FunctionRef{std::move(name)};
}

inline bool function_registered(std::string_view name) {
  auto& r = detail::fn_registry();
  std::lock_guard lock(r.m);
  return r.fns.find(name) != r.fns.end();
}

inline TreeFn resolve_function(const FunctionRef& ref) {
  auto& r = detail::fn_registry();
  std::lock_guard lock(r.m);
  auto it = r.fns.find(ref.name);
  if (it == r.fns.end())
    throw std::invalid_argument("[pytree] function '" + ref.name + "' is not registered");
  return it->second;
}

inline PyTree invoke(const FunctionRef& ref, std::span<const PyTree> args) {
  return resolve_function(ref)(args);
}

inline PyTree invoke(const FunctionRef& ref, std::initializer_list<PyTree> args) {
  return invoke(ref, std::span<const PyTree>(args.begin(), args.size()));
}

// ---------------------------------------------------------------------------
// flatten / unflatten and friends
// ---------------------------------------------------------------------------

struct Flattened {
  std::vector<Leaf> leaves;
  StructureFingerprint structure;
};

namespace detail {

inline Skeleton flatten_into(const PyTree& t, std::vector<Leaf>& leaves) {
  Skeleton sk;
  switch (t.kind()) {
    case NodeKind::Leaf:
      leaves.push_back(t.leaf_value());
      return sk;
    case NodeKind::Seq: sk.kind = NodeKind::Seq; break;
    case NodeKind::Tup: sk.kind = NodeKind::Tup; break;
    case NodeKind::Map:
      sk.kind = NodeKind::Map;
      sk.keys = t.map_keys();
      break;
    case NodeKind::Reg:
      sk.kind = NodeKind::Reg;
      sk.tag = t.reg_tag();
      sk.payload = t.reg_payload();
      sk.child_names = t.reg_child_names();
      break;
  }
  sk.leaf_count = 0;
  for (const PyTree& c : t.children()) {
    sk.children.push_back(flatten_into(c, leaves));
    sk.leaf_count += sk.children.back().leaf_count;
  }
  return sk;
}

inline PyTree unflatten_walk(const Skeleton& sk, std::span<const Leaf> leaves, std::size_t& next) {
  switch (sk.kind) {
    case NodeKind::Leaf: return PyTree::leaf(leaves[next++]);
    case NodeKind::Seq:
    case NodeKind::Tup: {
      std::vector<PyTree> children;
      children.reserve(sk.children.size());
      for (const Skeleton& c : sk.children) children.push_back(unflatten_walk(c, leaves, next));
      return sk.kind == NodeKind::Seq ? PyTree::seq(std::move(children)) : PyTree::tup(std::move(children));
    }
    case NodeKind::Map: {
      std::vector<std::pair<std::string, PyTree>> entries;
      entries.reserve(sk.children.size());
      for (std::size_t i = 0; i < sk.children.size(); ++i)
        entries.emplace_back(sk.keys[i], unflatten_walk(sk.children[i], leaves, next));
      return PyTree::map(std::move(entries));
    }
    case NodeKind::Reg: {
      std::vector<PyTree> children;
      children.reserve(sk.children.size());
      for (const Skeleton& c : sk.children) children.push_back(unflatten_walk(c, leaves, next));
      return node_kind(sk.tag).from_children(sk.payload, std::move(children));
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace detail

inline Flattened flatten(const PyTree& t) {
  std::vector<Leaf> leaves;
  detail::Skeleton sk = detail::flatten_into(t, leaves);
  return Flattened{std::move(leaves), StructureFingerprint(std::move(sk))};
}

inline PyTree unflatten(const StructureFingerprint& structure, std::span<const Leaf> leaves) {
  if (leaves.size() != structure.leaf_count())
    throw std::invalid_argument("[unflatten] structure needs " + std::to_string(structure.leaf_count()) +
                                " leaves, got " + std::to_string(leaves.size()));
  std::size_t next = 0;
  return detail::unflatten_walk(structure.skeleton(), leaves, next);
}

inline PyTree tree_map(const std::function<Leaf(const Leaf&)>& f, const PyTree& t) {
  Flattened flat = flatten(t);
  for (Leaf& l : flat.leaves) l = f(l);
  return unflatten(flat.structure, flat.leaves);
}

inline PyTree tree_map2(const std::function<Leaf(const Leaf&, const Leaf&)>& f, const PyTree& a,
                        const PyTree& b) {
  Flattened fa = flatten(a);
  Flattened fb = flatten(b);
  if (fa.structure != fb.structure)
    throw std::invalid_argument("[tree_map2] structure mismatch: " + fa.structure.text() + " vs " +
                                fb.structure.text());
  for (std::size_t i = 0; i < fa.leaves.size(); ++i) fa.leaves[i] = f(fa.leaves[i], fb.leaves[i]);
  return unflatten(fa.structure, fa.leaves);
}

inline bool tree_equal(const PyTree& a, const PyTree& b) {
  Flattened fa = flatten(a);
  Flattened fb = flatten(b);
  if (fa.structure != fb.structure) return false;
  for (std::size_t i = 0; i < fa.leaves.size(); ++i)
    if (!leaf_equal(fa.leaves[i], fb.leaves[i])) return false;
  return true;
}

// The tree whose only node is this leaf's; errors otherwise.
inline const Leaf& tree_leaf(const PyTree& t) {
  if (t.kind() != NodeKind::Leaf)
    throw std::invalid_argument("[pytree] expected a single-leaf tree, got " + flatten(t).structure.text());
  return t.leaf_value();
}

// Path of leaf `index` within the structure, e.g. "$[0].layers[1].weight".
inline std::string leaf_path(const StructureFingerprint& structure, std::size_t index) {
  if (index >= structure.leaf_count())
    throw std::invalid_argument("[pytree] leaf index " + std::to_string(index) + " out of range");
  std::string path = "$";
  const detail::Skeleton* sk = &structure.skeleton();
  while (sk->kind != NodeKind::Leaf) {
    std::size_t i = 0;
    while (index >= sk->children[i].leaf_count) {
      index -= sk->children[i].leaf_count;
      ++i;
    }
    switch (sk->kind) {
      case NodeKind::Seq:
      case NodeKind::Tup: path += "[" + std::to_string(i) + "]"; break;
      case NodeKind::Map:
        if (detail::is_bare_ident(sk->keys[i])) {
          path += "." + sk->keys[i];
        } else {
          path += "[";
          detail::append_quoted(path, sk->keys[i]);
          path += "]";
        }
        break;
      case NodeKind::Reg:
        if (i < sk->child_names.size())
          path += "." + sk->child_names[i];
        else
          path += "[" + std::to_string(i) + "]";
        break;
      case NodeKind::Leaf: break;
    }
    sk = &sk->children[i];
  }
  return path;
}

}  // namespace treegrad
