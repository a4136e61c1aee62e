#pragma once

// Parameterised functions as PyTrees. A schema declares a node tag, ordered
// fields (child subtrees or static values) and a forward function; instances
// are plain registered nodes, so every tree operation and transformation
// works on them with no special cases. Methods are looked up in the schema
// and can be bound, producing a "bound_method" node whose single child is the
// receiver.

#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "trace.hpp"

namespace treegrad {

struct FieldSpec {
  enum class Kind { Child, Static };
  std::string name;
  Kind kind = Kind::Child;
};

class ModuleSchema {
 public:
  ModuleSchema(std::string tag, std::vector<FieldSpec> fields, FunctionRef forward)
      : tag_(std::move(tag)), fields_(std::move(fields)), forward_(std::move(forward)) {
    for (const FieldSpec& f : fields_)
      if (f.kind == FieldSpec::Kind::Child)
        child_names_.push_back(f.name);
      else
        static_names_.push_back(f.name);
  }

  const std::string& tag() const { return tag_; }
  const std::vector<FieldSpec>& fields() const { return fields_; }
  const std::vector<std::string>& child_names() const { return child_names_; }
  const std::vector<std::string>& static_names() const { return static_names_; }
  const FunctionRef& forward() const { return forward_; }

  bool has_method(std::string_view name) const { return name == "call"; }
  const FunctionRef& method(std::string_view name) const {
    if (!has_method(name))
      throw std::invalid_argument("[module] '" + tag_ + "' has no method '" + std::string(name) + "'");
    return forward_;
  }

  const FieldSpec& field(std::string_view name) const {
    for (const FieldSpec& f : fields_)
      if (f.name == name) return f;
    throw std::invalid_argument("[module] '" + tag_ + "' has no field '" + std::string(name) + "'");
  }

  std::size_t child_index(std::string_view name) const {
    for (std::size_t i = 0; i < child_names_.size(); ++i)
      if (child_names_[i] == name) return i;
    throw std::invalid_argument("[module] '" + tag_ + "' has no child field '" + std::string(name) + "'");
  }

 private:
  std::string tag_;
  std::vector<FieldSpec> fields_;
  std::vector<std::string> child_names_;
  std::vector<std::string> static_names_;
  FunctionRef forward_;
};

namespace detail {

struct SchemaRegistry {
  std::mutex m;
  std::map<std::string, std::shared_ptr<const ModuleSchema>, std::less<>> schemas;
};

inline SchemaRegistry& schema_registry() {
  static SchemaRegistry r;
  return r;
}

inline constexpr std::string_view kBoundMethodTag = "bound_method";

inline bool ensure_bound_method_kind() {
  static const bool once = [] {
    register_node_kind(NodeRegistration{std::string(kBoundMethodTag), nullptr, nullptr});
    return true;
  }();
  return once;
}

// Registering the kind at static-init time keeps checkpoints containing bound
// methods loadable in any program that links the module layer.
inline const bool bound_method_registered = ensure_bound_method_kind();

}  // namespace detail

inline std::shared_ptr<const ModuleSchema> find_schema(std::string_view tag) {
  auto& r = detail::schema_registry();
  std::lock_guard lock(r.m);
  auto it = r.schemas.find(tag);
  return it == r.schemas.end() ? nullptr : it->second;
}

// Declares a module kind: registers the node tag, the forward function (as
// "<tag>.call") and the field layout. Fields keep their declaration order;
// child fields become node children, static fields live in the payload.
inline const ModuleSchema& define_schema(std::string tag, std::vector<FieldSpec> fields, TreeFn forward_impl) {
  detail::ensure_bound_method_kind();
  if (!detail::valid_tag(tag)) throw std::invalid_argument("[module] invalid tag '" + tag + "'");
  if (tag == detail::kBoundMethodTag)
    throw std::invalid_argument("[module] tag 'bound_method' is reserved");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (!detail::is_bare_ident(fields[i].name))
      throw std::invalid_argument("[module] invalid field name '" + fields[i].name + "'");
    for (std::size_t j = i + 1; j < fields.size(); ++j)
      if (fields[i].name == fields[j].name)
        throw std::invalid_argument("[module] duplicate field '" + fields[i].name + "' in '" + tag + "'");
  }
  if (find_schema(tag))
    throw std::invalid_argument("[module] schema '" + tag + "' is already defined");

  FunctionRef forward = register_function(tag + ".call", std::move(forward_impl));
  auto schema = std::make_shared<const ModuleSchema>(tag, std::move(fields), std::move(forward));

  std::vector<std::string> child_names = schema->child_names();
  std::vector<std::string> static_names = schema->static_names();
  NodeRegistration reg;
  reg.tag = tag;
  reg.from_children = [tag, child_names, static_names](const StaticValue& payload,
                                                       std::vector<PyTree> children) {
    if (children.size() != child_names.size())
      throw std::invalid_argument("[module] '" + tag + "' expects " + std::to_string(child_names.size()) +
                                  " children, got " + std::to_string(children.size()));
    if (!payload.is_fields() || payload.as_fields().size() != static_names.size())
      throw std::invalid_argument("[module] '" + tag + "' payload does not match its schema");
    for (std::size_t i = 0; i < static_names.size(); ++i)
      if (payload.as_fields()[i].first != static_names[i])
        throw std::invalid_argument("[module] '" + tag + "' payload does not match its schema");
    return PyTree::registered(tag, payload, std::move(children), child_names);
  };
  register_node_kind(std::move(reg));

  auto& r = detail::schema_registry();
  std::lock_guard lock(r.m);
  return *r.schemas.emplace(tag, schema).first->second;
}

// A module instance: a registered node viewed through its schema.
class ModuleValue {
 public:
  static ModuleValue wrap(PyTree t) {
    if (t.kind() != NodeKind::Reg)
      throw std::invalid_argument("[module] value is not a registered node");
    auto schema = find_schema(t.reg_tag());
    if (!schema)
      throw std::invalid_argument("[module] '" + t.reg_tag() + "' is not a module schema");
    return ModuleValue(std::move(schema), std::move(t));
  }

  const PyTree& tree() const { return tree_; }
  const ModuleSchema& schema() const { return *schema_; }

  const PyTree& child(std::string_view name) const {
    return tree_.children()[schema_->child_index(name)];
  }

  const StaticValue& static_field(std::string_view name) const {
    if (schema_->field(name).kind != FieldSpec::Kind::Static)
      throw std::invalid_argument("[module] field '" + std::string(name) + "' of '" + schema_->tag() +
                                  "' is a child field, not static");
    const StaticValue* v = tree_.reg_payload().field(name);
    if (!v) throw std::invalid_argument("[module] payload of '" + schema_->tag() + "' is malformed");
    return *v;
  }

  // Runs the forward function on (self, inputs...).
  PyTree operator()(std::span<const PyTree> inputs) const {
    std::vector<PyTree> args;
    args.reserve(inputs.size() + 1);
    args.push_back(tree_);
    args.insert(args.end(), inputs.begin(), inputs.end());
    return invoke(schema_->forward(), args);
  }
  PyTree operator()(std::initializer_list<PyTree> inputs) const {
    return (*this)(std::span<const PyTree>(inputs.begin(), inputs.size()));
  }

 private:
  ModuleValue(std::shared_ptr<const ModuleSchema> schema, PyTree tree)
      : schema_(std::move(schema)), tree_(std::move(tree)) {}
  std::shared_ptr<const ModuleSchema> schema_;
  PyTree tree_;
};

struct ChildInit {
  std::string name;
  PyTree value;
};
struct StaticInit {
  std::string name;
  StaticValue value;
};

// Builds an instance; every field must be assigned exactly once and with the
// right kind.
inline ModuleValue instantiate(const ModuleSchema& schema, std::vector<ChildInit> children,
                               std::vector<StaticInit> statics = {}) {
  std::vector<const PyTree*> child_slots(schema.child_names().size(), nullptr);
  std::vector<const StaticValue*> static_slots(schema.static_names().size(), nullptr);
  auto index_of = [](const std::vector<std::string>& names, const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    return names.size();
  };
  for (const ChildInit& c : children) {
    const FieldSpec& f = schema.field(c.name);  // throws for unknown fields
    if (f.kind != FieldSpec::Kind::Child)
      throw std::invalid_argument("[module] field '" + c.name + "' of '" + schema.tag() +
                                  "' is static, not a child");
    std::size_t i = index_of(schema.child_names(), c.name);
    if (child_slots[i])
      throw std::invalid_argument("[module] field '" + c.name + "' assigned twice");
    child_slots[i] = &c.value;
  }
  for (const StaticInit& s : statics) {
    const FieldSpec& f = schema.field(s.name);
    if (f.kind != FieldSpec::Kind::Static)
      throw std::invalid_argument("[module] field '" + s.name + "' of '" + schema.tag() +
                                  "' is a child, not static");
    std::size_t i = index_of(schema.static_names(), s.name);
    if (static_slots[i])
      throw std::invalid_argument("[module] field '" + s.name + "' assigned twice");
    static_slots[i] = &s.value;
  }
  for (std::size_t i = 0; i < child_slots.size(); ++i)
    if (!child_slots[i])
      throw std::invalid_argument("[module] missing field '" + schema.child_names()[i] + "' for '" +
                                  schema.tag() + "'");
  for (std::size_t i = 0; i < static_slots.size(); ++i)
    if (!static_slots[i])
      throw std::invalid_argument("[module] missing field '" + schema.static_names()[i] + "' for '" +
                                  schema.tag() + "'");

  std::vector<PyTree> kids;
  kids.reserve(child_slots.size());
  for (const PyTree* p : child_slots) kids.push_back(*p);
  StaticValue::Fields payload;
  payload.reserve(static_slots.size());
  for (std::size_t i = 0; i < static_slots.size(); ++i)
    payload.emplace_back(schema.static_names()[i], *static_slots[i]);
  return ModuleValue::wrap(
      PyTree::registered(schema.tag(), StaticValue::fields(std::move(payload)), std::move(kids),
                         schema.child_names()));
}

// Bound method: a registered node carrying the receiver as its only child, so
// it flattens to exactly the receiver's leaves.
inline PyTree bind_method(const ModuleValue& m, std::string_view method = "call") {
  detail::ensure_bound_method_kind();
  m.schema().method(method);  // validates existence
  StaticValue payload = StaticValue::fields(
      {{"schema", StaticValue::of_string(m.schema().tag())},
       {"method", StaticValue::of_string(std::string(method))}});
  return PyTree::registered(std::string(detail::kBoundMethodTag), std::move(payload), {m.tree()},
                            {"self"});
}

// Calls a module instance (its "call" method) or a bound method node.
inline PyTree call_tree(const PyTree& t, std::span<const PyTree> inputs) {
  if (t.kind() != NodeKind::Reg)
    throw std::invalid_argument("[call] tree is not callable (not a registered node)");
  if (t.reg_tag() == detail::kBoundMethodTag) {
    const StaticValue* schema_name = t.reg_payload().field("schema");
    const StaticValue* method_name = t.reg_payload().field("method");
    if (!schema_name || !method_name)
      throw std::invalid_argument("[call] malformed bound method payload");
    auto schema = find_schema(schema_name->as_string());
    if (!schema)
      throw std::invalid_argument("[call] bound method refers to unknown schema '" +
                                  schema_name->as_string() + "'");
    std::vector<PyTree> args;
    args.reserve(inputs.size() + 1);
    args.push_back(t.children()[0]);
    args.insert(args.end(), inputs.begin(), inputs.end());
    return invoke(schema->method(method_name->as_string()), args);
  }
  return ModuleValue::wrap(t)(inputs);
}

inline PyTree call_tree(const PyTree& t, std::initializer_list<PyTree> inputs) {
  return call_tree(t, std::span<const PyTree>(inputs.begin(), inputs.size()));
}

// Out-of-place field update; the input instance is untouched.
inline ModuleValue replace_fields(const ModuleValue& m, std::vector<ChildInit> children,
                                  std::vector<StaticInit> statics = {}) {
  const ModuleSchema& schema = m.schema();
  std::vector<PyTree> kids(m.tree().children().begin(), m.tree().children().end());
  StaticValue::Fields payload = m.tree().reg_payload().as_fields();
  for (const ChildInit& c : children) {
    if (schema.field(c.name).kind != FieldSpec::Kind::Child)
      throw std::invalid_argument("[module] field '" + c.name + "' of '" + schema.tag() +
                                  "' is static, not a child");
    kids[schema.child_index(c.name)] = c.value;
  }
  for (const StaticInit& s : statics) {
    if (schema.field(s.name).kind != FieldSpec::Kind::Static)
      throw std::invalid_argument("[module] field '" + s.name + "' of '" + schema.tag() +
                                  "' is a child, not static");
    for (auto& [k, v] : payload)
      if (k == s.name) v = s.value;
  }
  return ModuleValue::wrap(PyTree::registered(schema.tag(), StaticValue::fields(std::move(payload)),
                                              std::move(kids), schema.child_names()));
}

}  // namespace treegrad
