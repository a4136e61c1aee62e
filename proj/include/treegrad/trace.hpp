#pragma once

// Tracing: running a function with symbolic tensor stand-ins records an SSA
// graph of primitive equations. Operations dispatch on their operands, so the
// same code path computes eagerly, records into a trace, or both at once when
// traces nest. At most three trace contexts may be active per thread.

#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pytree.hpp"
#include "tensor.hpp"

namespace treegrad {

using VarId = std::int32_t;

struct Equation {
  Primitive prim;
  std::vector<VarId> args;
  VarId out = -1;
};

// SSA program: every variable is an input, a capture, a constant, or the
// result of exactly one equation.
struct Graph {
  std::vector<TensorSpec> vars;
  std::vector<VarId> inputs;
  std::vector<VarId> captures;
  std::vector<std::pair<VarId, Tensor>> constants;
  std::vector<Equation> equations;
  std::vector<VarId> outputs;
};

inline constexpr int kMaxTraceDepth = 3;

namespace detail {

class TraceContext {
 public:
  TraceContext(std::uint64_t id, int level) : id_(id), level_(level) {}

  std::uint64_t id() const { return id_; }
  int level() const { return level_; }
  Graph& graph() { return graph_; }
  const std::vector<Leaf>& capture_values() const { return capture_values_; }

  VarId fresh_var(const TensorSpec& spec) {
    graph_.vars.push_back(spec);
    return static_cast<VarId>(graph_.vars.size() - 1);
  }

  VarId input_var(const TensorSpec& spec) {
    VarId v = fresh_var(spec);
    graph_.inputs.push_back(v);
    return v;
  }

  // Constants are deduplicated bitwise.
  VarId constant_var(const Tensor& t) {
    std::string key = t.content_key();
    auto it = const_dedup_.find(key);
    if (it != const_dedup_.end()) return it->second;
    VarId v = fresh_var(t.spec());
    graph_.constants.emplace_back(v, t);
    const_dedup_.emplace(std::move(key), v);
    return v;
  }

  // A tracer from an enclosing (lower-level) context becomes a capture.
  VarId capture_var(const Leaf& outer) {
    const Tracer& tr = outer.tracer_value();
    auto key = std::make_pair(tr.ctx, tr.var);
    auto it = capture_dedup_.find(key);
    if (it != capture_dedup_.end()) return it->second;
    VarId v = fresh_var(tr.spec);
    graph_.captures.push_back(v);
    capture_values_.push_back(outer);
    capture_dedup_.emplace(key, v);
    return v;
  }

  Leaf record(Primitive prim, std::vector<VarId> args, const TensorSpec& out_spec) {
    VarId v = fresh_var(out_spec);
    graph_.equations.push_back(Equation{std::move(prim), std::move(args), v});
    return Leaf::tracer(Tracer{id_, level_, v, out_spec});
  }

  Leaf tracer_for(VarId v) const { return Leaf::tracer(Tracer{id_, level_, v, graph_.vars[v]}); }

 private:
  struct PairHash {
    std::size_t operator()(const std::pair<std::uint64_t, VarId>& p) const {
      return std::hash<std::uint64_t>()(p.first * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(p.second));
    }
  };

  std::uint64_t id_;
  int level_;
  Graph graph_;
  std::unordered_map<std::string, VarId> const_dedup_;
  std::unordered_map<std::pair<std::uint64_t, VarId>, VarId, PairHash> capture_dedup_;
  std::vector<Leaf> capture_values_;
};

inline std::vector<std::unique_ptr<TraceContext>>& trace_stack() {
  thread_local std::vector<std::unique_ptr<TraceContext>> stack;
  return stack;
}

inline std::uint64_t next_context_id() {
  static std::atomic<std::uint64_t> next{1};
  return next.fetch_add(1);
}

// Validates a tracer against the active stack; returns its context.
inline TraceContext& context_of(const Tracer& tr, const char* op) {
  auto& stack = trace_stack();
  if (tr.level < 1 || static_cast<std::size_t>(tr.level) > stack.size() ||
      stack[tr.level - 1]->id() != tr.ctx)
    throw std::runtime_error(std::string("[") + op +
                             "] traced value escaped its trace context (leaked tracer)");
  return *stack[tr.level - 1];
}

}  // namespace detail

// Applies a primitive to tensor/tracer leaves: eager when all operands are
// concrete, otherwise recorded into the highest-level operand's context with
// concrete operands as constants and lower-level tracers as captures.
inline Leaf apply_prim(const Primitive& p, std::span<const Leaf> operands) {
  std::vector<TensorSpec> specs;
  specs.reserve(operands.size());
  int level = 0;
  for (const Leaf& l : operands) {
    if (l.is_tensor()) {
      specs.push_back(l.tensor().spec());
    } else if (l.is_tracer()) {
      detail::TraceContext& ctx = detail::context_of(l.tracer_value(), p.name());
      (void)ctx;
      specs.push_back(l.tracer_value().spec);
      level = std::max(level, l.tracer_value().level);
    } else {
      throw std::invalid_argument(std::string("[") + p.name() + "] operand is a " + l.kind_name() +
                                  ", not a tensor");
    }
  }
  TensorSpec out = infer_prim(p, specs);

  if (level == 0) {
    std::vector<Tensor> ins;
    ins.reserve(operands.size());
    for (const Leaf& l : operands) ins.push_back(l.tensor());
    return Leaf::tensor(eval_prim(p, ins));
  }

  detail::TraceContext& ctx = *detail::trace_stack()[level - 1];
  std::vector<VarId> args;
  args.reserve(operands.size());
  for (const Leaf& l : operands) {
    if (l.is_tensor()) {
      args.push_back(ctx.constant_var(l.tensor()));
    } else if (l.tracer_value().level == level) {
      args.push_back(l.tracer_value().var);
    } else {
      args.push_back(ctx.capture_var(l));
    }
  }
  return ctx.record(p, std::move(args), out);
}

inline Leaf add(const Leaf& a, const Leaf& b) {
  return apply_prim(Primitive::simple(PrimOp::Add), std::array{a, b});
}
inline Leaf sub(const Leaf& a, const Leaf& b) {
  return apply_prim(Primitive::simple(PrimOp::Sub), std::array{a, b});
}
inline Leaf mul(const Leaf& a, const Leaf& b) {
  return apply_prim(Primitive::simple(PrimOp::Mul), std::array{a, b});
}
inline Leaf div(const Leaf& a, const Leaf& b) {
  return apply_prim(Primitive::simple(PrimOp::Div), std::array{a, b});
}
inline Leaf neg(const Leaf& a) { return apply_prim(Primitive::simple(PrimOp::Neg), std::array{a}); }
inline Leaf relu(const Leaf& a) { return apply_prim(Primitive::simple(PrimOp::Relu), std::array{a}); }
inline Leaf matmul(const Leaf& a, const Leaf& b) {
  return apply_prim(Primitive::simple(PrimOp::MatMul), std::array{a, b});
}
inline Leaf reduce_sum(const Leaf& a, std::optional<std::vector<int>> axes = std::nullopt) {
  return apply_prim(Primitive::reduce(PrimOp::ReduceSum, std::move(axes)), std::array{a});
}
inline Leaf reduce_mean(const Leaf& a, std::optional<std::vector<int>> axes = std::nullopt) {
  return apply_prim(Primitive::reduce(PrimOp::ReduceMean, std::move(axes)), std::array{a});
}
inline Leaf broadcast_to(const Leaf& a, Shape target) {
  return apply_prim(Primitive::broadcast(std::move(target)), std::array{a});
}
inline Leaf transpose(const Leaf& a, std::vector<int> perm) {
  return apply_prim(Primitive::transpose_perm(std::move(perm)), std::array{a});
}
inline Leaf reshape(const Leaf& a, Shape target) {
  return apply_prim(Primitive::reshape_to(std::move(target)), std::array{a});
}

inline Leaf operator+(const Leaf& a, const Leaf& b) { return add(a, b); }
inline Leaf operator-(const Leaf& a, const Leaf& b) { return sub(a, b); }
inline Leaf operator*(const Leaf& a, const Leaf& b) { return mul(a, b); }
inline Leaf operator/(const Leaf& a, const Leaf& b) { return div(a, b); }
inline Leaf operator-(const Leaf& a) { return neg(a); }

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

// Where a leaf of a traced argument goes: a graph input, or passed through
// untouched (static data the function sees concretely).
enum class LeafUse { Input, Static };
using LeafPolicy = std::function<LeafUse(std::size_t arg_index, const Leaf& leaf)>;

// One output leaf: either a graph output variable or a fixed concrete leaf.
struct OutSlot {
  VarId var = -1;
  std::optional<Leaf> fixed;
};

struct Traced {
  Graph graph;
  std::vector<Leaf> captured;  // outer values feeding graph.captures, in order
  std::vector<StructureFingerprint> arg_structures;
  std::vector<std::vector<VarId>> arg_leaf_vars;  // -1 for static leaves
  StructureFingerprint out_structure;
  std::vector<OutSlot> out_slots;
};

namespace detail {

struct ContextGuard {
  ContextGuard() {
    auto& stack = trace_stack();
    if (stack.size() >= static_cast<std::size_t>(kMaxTraceDepth))
      throw std::runtime_error("[trace] transformation nesting deeper than " +
                               std::to_string(kMaxTraceDepth) + " levels is not supported");
    stack.push_back(std::make_unique<TraceContext>(next_context_id(), static_cast<int>(stack.size()) + 1));
  }
  ~ContextGuard() { trace_stack().pop_back(); }
  TraceContext& ctx() { return *trace_stack().back(); }
};

}  // namespace detail

inline Traced trace_with_policy(const TreeFn& fn, std::span<const PyTree> args, const LeafPolicy& policy,
                                bool allow_static_outputs) {
  detail::ContextGuard guard;
  detail::TraceContext& ctx = guard.ctx();

  std::vector<StructureFingerprint> arg_structures;
  std::vector<std::vector<VarId>> arg_leaf_vars;
  std::vector<PyTree> traced_args;
  traced_args.reserve(args.size());
  for (std::size_t i = 0; i < args.size(); ++i) {
    Flattened flat = flatten(args[i]);
    std::vector<VarId> vars(flat.leaves.size(), -1);
    for (std::size_t j = 0; j < flat.leaves.size(); ++j) {
      if (policy(i, flat.leaves[j]) == LeafUse::Input) {
        VarId v = ctx.input_var(leaf_spec(flat.leaves[j]));
        vars[j] = v;
        flat.leaves[j] = ctx.tracer_for(v);
      }
    }
    traced_args.push_back(unflatten(flat.structure, flat.leaves));
    arg_structures.push_back(std::move(flat.structure));
    arg_leaf_vars.push_back(std::move(vars));
  }

  PyTree result = fn(traced_args);

  Flattened out = flatten(result);
  std::vector<OutSlot> slots(out.leaves.size());
  for (std::size_t j = 0; j < out.leaves.size(); ++j) {
    const Leaf& l = out.leaves[j];
    if (l.is_tracer()) {
      const Tracer& tr = l.tracer_value();
      detail::context_of(tr, "trace");  // stale tracers in outputs are leaks too
      slots[j].var = tr.level == ctx.level() ? tr.var : ctx.capture_var(l);
      ctx.graph().outputs.push_back(slots[j].var);
    } else if (l.is_tensor()) {
      slots[j].var = ctx.constant_var(l.tensor());
      ctx.graph().outputs.push_back(slots[j].var);
    } else {
      if (!allow_static_outputs)
        throw std::invalid_argument(std::string("[trace] function returned a ") + l.kind_name() +
                                    " leaf; only tensors can be traced");
      slots[j].fixed = l;
    }
  }

  return Traced{std::move(ctx.graph()),
                std::vector<Leaf>(ctx.capture_values()),
                std::move(arg_structures),
                std::move(arg_leaf_vars),
                std::move(out.structure),
                std::move(slots)};
}

// Records the graph of `fn` applied to tensors shaped like `example_args`.
// Every argument leaf must be a tensor.
inline Graph trace(const TreeFn& fn, std::span<const PyTree> example_args) {
  LeafPolicy strict = [](std::size_t i, const Leaf& l) {
    if (!l.is_tensorish())
      throw std::invalid_argument("[trace] argument " + std::to_string(i) + " contains a " +
                                  std::string(l.kind_name()) + " leaf; only tensors can be traced");
    return LeafUse::Input;
  };
  return trace_with_policy(fn, example_args, strict, false).graph;
}

// ---------------------------------------------------------------------------
// Graph interpretation and display
// ---------------------------------------------------------------------------

inline std::vector<Tensor> eval_graph(const Graph& g, std::span<const Tensor> inputs,
                                      std::span<const Tensor> captures = {}) {
  if (inputs.size() != g.inputs.size())
    throw std::invalid_argument("[eval_graph] expected " + std::to_string(g.inputs.size()) +
                                " inputs, got " + std::to_string(inputs.size()));
  if (captures.size() != g.captures.size())
    throw std::invalid_argument("[eval_graph] expected " + std::to_string(g.captures.size()) +
                                " captures, got " + std::to_string(captures.size()));
  std::vector<std::optional<Tensor>> env(g.vars.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].spec() != g.vars[g.inputs[i]])
      throw std::invalid_argument("[eval_graph] input " + std::to_string(i) + ": declared " +
                                  g.vars[g.inputs[i]].str() + ", got " + inputs[i].spec().str());
    env[g.inputs[i]] = inputs[i];
  }
  for (std::size_t i = 0; i < captures.size(); ++i) {
    if (captures[i].spec() != g.vars[g.captures[i]])
      throw std::invalid_argument("[eval_graph] capture " + std::to_string(i) + ": declared " +
                                  g.vars[g.captures[i]].str() + ", got " + captures[i].spec().str());
    env[g.captures[i]] = captures[i];
  }
  for (const auto& [v, t] : g.constants) env[v] = t;
  for (const Equation& eq : g.equations) {
    std::vector<Tensor> args;
    args.reserve(eq.args.size());
    for (VarId v : eq.args) {
      if (!env[v]) throw std::runtime_error("[eval_graph] variable %" + std::to_string(v) + " is unbound");
      args.push_back(*env[v]);
    }
    env[eq.out] = eval_prim(eq.prim, args);
  }
  std::vector<Tensor> out;
  out.reserve(g.outputs.size());
  for (VarId v : g.outputs) {
    if (!env[v]) throw std::runtime_error("[eval_graph] output %" + std::to_string(v) + " is unbound");
    out.push_back(*env[v]);
  }
  return out;
}

// Deterministic listing; equal traces of the same function are byte-identical.
inline std::string format_graph(const Graph& g) {
  std::string s;
  for (VarId v : g.inputs) s += "input %" + std::to_string(v) + ": " + g.vars[v].str() + "\n";
  for (VarId v : g.captures) s += "capture %" + std::to_string(v) + ": " + g.vars[v].str() + "\n";
  for (const auto& [v, t] : g.constants)
    s += "const %" + std::to_string(v) + ": " + g.vars[v].str() + " = " + render_tensor_values(t) + "\n";
  for (const Equation& eq : g.equations) {
    s += "%" + std::to_string(eq.out) + ": " + g.vars[eq.out].str() + " = " + eq.prim.name() + "(";
    for (std::size_t i = 0; i < eq.args.size(); ++i) {
      s += "%" + std::to_string(eq.args[i]);
      if (i + 1 < eq.args.size()) s += ", ";
    }
    std::string params = eq.prim.params_str();
    if (!params.empty()) s += "; " + params;
    s += ")\n";
  }
  for (VarId v : g.outputs) s += "output %" + std::to_string(v) + "\n";
  return s;
}

}  // namespace treegrad
