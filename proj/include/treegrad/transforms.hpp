#pragma once

// grad, value_and_grad, vmap and jit. Each wraps a tree function into another
// tree function, so transformations compose freely; composition is bounded
// only by the trace nesting depth.

#include <map>
#include <memory>
#include <mutex>

#include "rules.hpp"
#include "trace.hpp"

namespace treegrad {

namespace detail {

struct JitState {
  std::mutex m;
  std::map<std::string, std::shared_ptr<const Traced>> cache;
  int traces = 0;
};

}  // namespace detail

class TransformedFunction {
 public:
  explicit TransformedFunction(TreeFn impl, std::shared_ptr<detail::JitState> jit = nullptr)
      : impl_(std::move(impl)), jit_(std::move(jit)) {}

  PyTree operator()(std::span<const PyTree> args) const { return impl_(args); }
  PyTree operator()(std::initializer_list<PyTree> args) const {
    std::vector<PyTree> v(args.begin(), args.end());
    return impl_(v);
  }

  // How many times the wrapped function has been traced; 0 for non-caching
  // transformations.
  int trace_count() const {
    if (!jit_) return 0;
    std::lock_guard lock(jit_->m);
    return jit_->traces;
  }

  operator TreeFn() const { return impl_; }
  const TreeFn& fn() const { return impl_; }

 private:
  TreeFn impl_;
  std::shared_ptr<detail::JitState> jit_;
};

// ---------------------------------------------------------------------------
// grad
// ---------------------------------------------------------------------------

namespace detail {

struct GradOutcome {
  PyTree grads;
  PyTree value;
};

// Reverse-mode differentiation with respect to the first argument. When
// `filtered` is set, non-f64 leaves of the first argument pass through
// statically and get Sentinel gradients; otherwise they are an error.
inline GradOutcome grad_impl(const TreeFn& fn, std::span<const PyTree> args, bool filtered) {
  const char* opname = filtered ? "filter_grad" : "grad";
  if (args.empty())
    throw std::invalid_argument(std::string("[") + opname + "] at least one argument is required");

  Flattened flat0 = flatten(args[0]);
  std::vector<bool> diff(flat0.leaves.size(), false);
  std::size_t n_diff = 0;
  for (std::size_t i = 0; i < flat0.leaves.size(); ++i) {
    const Leaf& l = flat0.leaves[i];
    bool is_f64 = l.is_tensorish() && leaf_spec(l).dtype == DType::F64;
    if (!filtered && !is_f64)
      throw std::invalid_argument("[grad] first argument leaf " + leaf_path(flat0.structure, i) +
                                  " is not an f64 tensor (" +
                                  (l.is_tensorish() ? leaf_spec(l).str() : l.kind_name()) +
                                  "); use the filtered variant for mixed trees");
    diff[i] = is_f64;
    n_diff += is_f64 ? 1 : 0;
  }
  if (n_diff == 0)
    throw std::invalid_argument(std::string("[") + opname +
                                "] first argument has no f64 tensor leaves to differentiate");

  LeafPolicy policy = [filtered, opname](std::size_t i, const Leaf& l) {
    if (i == 0)
      return l.is_tensorish() && leaf_spec(l).dtype == DType::F64 ? LeafUse::Input : LeafUse::Static;
    if (l.is_tensorish()) return LeafUse::Input;
    if (!filtered)
      throw std::invalid_argument("[grad] argument " + std::to_string(i) + " contains a " +
                                  std::string(l.kind_name()) +
                                  " leaf; use the filtered variant for mixed trees");
    return LeafUse::Static;
  };
  Traced tr = trace_with_policy(fn, args, policy, false);

  if (tr.out_slots.size() != 1 || tr.out_structure.text() != "*" || tr.out_slots[0].var < 0 ||
      !(tr.graph.vars[tr.out_slots[0].var] == TensorSpec{Shape{}, DType::F64})) {
    std::string got = tr.out_slots.size() == 1 && tr.out_slots[0].var >= 0
                          ? tr.graph.vars[tr.out_slots[0].var].str()
                          : tr.out_structure.text();
    throw std::invalid_argument(std::string("[") + opname +
                                "] function must return a rank-0 f64 tensor, got " + got);
  }

  // Forward pass over the recorded program with the actual argument leaves.
  // Under an enclosing trace these operations record there.
  std::vector<std::optional<Leaf>> env(tr.graph.vars.size());
  for (std::size_t a = 0; a < args.size(); ++a) {
    Flattened fl = a == 0 ? flat0 : flatten(args[a]);
    for (std::size_t j = 0; j < fl.leaves.size(); ++j)
      if (tr.arg_leaf_vars[a][j] >= 0) env[tr.arg_leaf_vars[a][j]] = fl.leaves[j];
  }
  for (const auto& [v, t] : tr.graph.constants) env[v] = Leaf::tensor(t);
  for (std::size_t c = 0; c < tr.graph.captures.size(); ++c) env[tr.graph.captures[c]] = tr.captured[c];
  for (const Equation& eq : tr.graph.equations) {
    std::vector<Leaf> in;
    in.reserve(eq.args.size());
    for (VarId v : eq.args) in.push_back(*env[v]);
    env[eq.out] = apply_prim(eq.prim, in);
  }
  VarId out_var = tr.out_slots[0].var;
  Leaf primal = *env[out_var];

  // Reverse pass: accumulate cotangents, newest equation first.
  std::vector<std::optional<Leaf>> ct(tr.graph.vars.size());
  ct[out_var] = Leaf::tensor(Tensor::scalar(1.0));
  for (auto it = tr.graph.equations.rbegin(); it != tr.graph.equations.rend(); ++it) {
    const Equation& eq = *it;
    if (!ct[eq.out]) continue;
    std::vector<Leaf> in;
    in.reserve(eq.args.size());
    for (VarId v : eq.args) in.push_back(*env[v]);
    std::vector<std::optional<Leaf>> contribs = vjp_rule(eq, in, *ct[eq.out]);
    for (std::size_t k = 0; k < contribs.size(); ++k) {
      if (!contribs[k]) continue;
      VarId v = eq.args[k];
      if (tr.graph.vars[v].dtype != DType::F64) continue;
      ct[v] = ct[v] ? add(*ct[v], *contribs[k]) : *contribs[k];
    }
  }

  // Unused parameters get zero gradients; static leaves get sentinels.
  std::vector<Leaf> gleaves;
  gleaves.reserve(flat0.leaves.size());
  for (std::size_t i = 0; i < flat0.leaves.size(); ++i) {
    if (!diff[i]) {
      gleaves.push_back(Leaf::sentinel());
      continue;
    }
    VarId v = tr.arg_leaf_vars[0][i];
    if (ct[v])
      gleaves.push_back(*ct[v]);
    else
      gleaves.push_back(Leaf::tensor(Tensor::zeros(tr.graph.vars[v].shape, DType::F64)));
  }
  return GradOutcome{unflatten(flat0.structure, gleaves), PyTree::leaf(primal)};
}

}  // namespace detail

// d(fn)/d(first argument); fn must return a rank-0 f64 tensor and its first
// argument must be all f64 tensors.
inline TransformedFunction grad(TreeFn fn) {
  return TransformedFunction([fn = std::move(fn)](std::span<const PyTree> args) {
    return detail::grad_impl(fn, args, false).grads;
  });
}

// Tup(value, gradients) in one pass.
inline TransformedFunction value_and_grad(TreeFn fn) {
  return TransformedFunction([fn = std::move(fn)](std::span<const PyTree> args) {
    detail::GradOutcome out = detail::grad_impl(fn, args, false);
    return PyTree::tup({std::move(out.value), std::move(out.grads)});
  });
}

// ---------------------------------------------------------------------------
// vmap
// ---------------------------------------------------------------------------

// Per-argument mapping declaration: every leaf mapped along axis 0, no leaves
// mapped, or a tree matching the argument with scalar-int 0 (mapped) and
// Sentinel (unmapped) leaves.
class AxisSpec {
 public:
  static AxisSpec all_leading() { return AxisSpec(Mode::All); }
  static AxisSpec none() { return AxisSpec(Mode::None); }
  static AxisSpec of_tree(PyTree t) {
    AxisSpec a(Mode::Tree);
    a.tree_ = std::make_shared<PyTree>(std::move(t));
    return a;
  }

  std::vector<bool> resolve(const Flattened& arg, std::size_t arg_index) const {
    switch (mode_) {
      case Mode::All: return std::vector<bool>(arg.leaves.size(), true);
      case Mode::None: return std::vector<bool>(arg.leaves.size(), false);
      case Mode::Tree: break;
    }
    Flattened spec = flatten(*tree_);
    if (spec.structure != arg.structure)
      throw std::invalid_argument("[vmap] axis spec for argument " + std::to_string(arg_index) +
                                  " has structure " + spec.structure.text() + " but the argument is " +
                                  arg.structure.text());
    std::vector<bool> out(spec.leaves.size(), false);
    for (std::size_t i = 0; i < spec.leaves.size(); ++i) {
      const Leaf& l = spec.leaves[i];
      if (l.is_sentinel()) continue;
      if (!l.is_scalar_int())
        throw std::invalid_argument("[vmap] axis spec leaves must be scalar int 0 or sentinel, got " +
                                    std::string(l.kind_name()) + " at " +
                                    leaf_path(spec.structure, i));
      if (l.scalar_int_value() != 0)
        throw std::invalid_argument("[vmap] only batch axis 0 is supported, got axis " +
                                    std::to_string(l.scalar_int_value()));
      out[i] = true;
    }
    return out;
  }

 private:
  enum class Mode { All, None, Tree };
  explicit AxisSpec(Mode m) : mode_(m) {}
  Mode mode_;
  std::shared_ptr<const PyTree> tree_;
};

inline TransformedFunction vmap(TreeFn fn, std::vector<AxisSpec> in_axes) {
  return TransformedFunction([fn = std::move(fn),
                              in_axes = std::move(in_axes)](std::span<const PyTree> args) -> PyTree {
    if (args.size() != in_axes.size())
      throw std::invalid_argument("[vmap] expected " + std::to_string(in_axes.size()) +
                                  " arguments, got " + std::to_string(args.size()));

    std::vector<Flattened> flats;
    std::vector<std::vector<bool>> mapped;
    flats.reserve(args.size());
    std::int64_t batch = -1;
    for (std::size_t a = 0; a < args.size(); ++a) {
      flats.push_back(flatten(args[a]));
      mapped.push_back(in_axes[a].resolve(flats[a], a));
      for (std::size_t j = 0; j < flats[a].leaves.size(); ++j) {
        if (!mapped[a][j]) continue;
        const Leaf& l = flats[a].leaves[j];
        std::string where = leaf_path(flats[a].structure, j) + " of argument " + std::to_string(a);
        if (!l.is_tensorish())
          throw std::invalid_argument("[vmap] mapped leaf " + where + " is a " + l.kind_name() +
                                      ", not a tensor");
        TensorSpec spec = leaf_spec(l);
        if (spec.shape.rank() == 0)
          throw std::invalid_argument("[vmap] mapped leaf " + where + " has rank 0, nothing to map over");
        std::int64_t b = spec.shape.dim(0);
        if (batch == -1)
          batch = b;
        else if (batch != b)
          throw std::invalid_argument("[vmap] inconsistent batch sizes: " + std::to_string(batch) +
                                      " vs " + std::to_string(b) + " at leaf " + where);
      }
    }
    if (batch == -1) throw std::invalid_argument("[vmap] no leaves are mapped");

    // Stand-in arguments with the batch axis stripped; only their specs matter.
    std::vector<PyTree> example;
    example.reserve(args.size());
    for (std::size_t a = 0; a < args.size(); ++a) {
      std::vector<Leaf> leaves = flats[a].leaves;
      for (std::size_t j = 0; j < leaves.size(); ++j) {
        if (!mapped[a][j]) continue;
        TensorSpec spec = leaf_spec(leaves[j]);
        std::vector<std::int64_t> rest(spec.shape.dims().begin() + 1, spec.shape.dims().end());
        leaves[j] = Leaf::tensor(Tensor::zeros(Shape(std::move(rest)), spec.dtype));
      }
      example.push_back(unflatten(flats[a].structure, leaves));
    }

    LeafPolicy policy = [](std::size_t, const Leaf& l) {
      return l.is_tensorish() ? LeafUse::Input : LeafUse::Static;
    };
    Traced tr = trace_with_policy(fn, example, policy, true);

    // Interpret the graph once over whole batches.
    std::vector<std::optional<BLeaf>> env(tr.graph.vars.size());
    for (std::size_t a = 0; a < args.size(); ++a)
      for (std::size_t j = 0; j < flats[a].leaves.size(); ++j)
        if (tr.arg_leaf_vars[a][j] >= 0)
          env[tr.arg_leaf_vars[a][j]] = BLeaf{flats[a].leaves[j], mapped[a][j]};
    for (const auto& [v, t] : tr.graph.constants) env[v] = BLeaf{Leaf::tensor(t), false};
    for (std::size_t c = 0; c < tr.graph.captures.size(); ++c)
      env[tr.graph.captures[c]] = BLeaf{tr.captured[c], false};
    for (const Equation& eq : tr.graph.equations) {
      std::vector<BLeaf> in;
      in.reserve(eq.args.size());
      for (VarId v : eq.args) in.push_back(*env[v]);
      env[eq.out] = batching_rule(eq, in, batch, tr.graph.vars);
    }

    std::vector<Leaf> out_leaves;
    out_leaves.reserve(tr.out_slots.size());
    for (const OutSlot& slot : tr.out_slots) {
      if (slot.fixed) {
        out_leaves.push_back(*slot.fixed);
        continue;
      }
      BLeaf r = *env[slot.var];
      if (!r.batched) {
        std::vector<std::int64_t> dims{batch};
        for (std::int64_t d : tr.graph.vars[slot.var].shape.dims()) dims.push_back(d);
        r = BLeaf{broadcast_to(r.v, Shape(std::move(dims))), true};
      }
      out_leaves.push_back(r.v);
    }
    return unflatten(tr.out_structure, out_leaves);
  });
}

inline TransformedFunction vmap(TreeFn fn) {
  return vmap(std::move(fn), std::vector<AxisSpec>{AxisSpec::all_leading()});
}

// ---------------------------------------------------------------------------
// jit
// ---------------------------------------------------------------------------

namespace detail {

inline TransformedFunction jit_impl(TreeFn fn, bool filtered) {
  const char* opname = filtered ? "filter_jit" : "jit";
  auto state = std::make_shared<JitState>();
  TreeFn impl = [fn = std::move(fn), state, filtered, opname](std::span<const PyTree> args) -> PyTree {
    std::vector<Flattened> flats;
    flats.reserve(args.size());
    bool inside_trace = false;
    for (const PyTree& a : args) {
      flats.push_back(flatten(a));
      for (const Leaf& l : flats.back().leaves) inside_trace |= l.is_tracer();
    }
    // Under an enclosing trace the call is inlined into it.
    if (inside_trace) return fn(args);

    std::string key;
    for (std::size_t a = 0; a < args.size(); ++a) {
      key += flats[a].structure.text();
      key += '\n';
      for (std::size_t j = 0; j < flats[a].leaves.size(); ++j) {
        const Leaf& l = flats[a].leaves[j];
        if (l.is_tensor()) {
          key += l.tensor().spec().str();
        } else {
          if (!filtered)
            throw std::invalid_argument("[jit] argument " + std::to_string(a) + " leaf " +
                                        leaf_path(flats[a].structure, j) + " is a " + l.kind_name() +
                                        "; use the filtered variant for mixed trees");
          key += l.signature();
        }
        key += ';';
      }
      key += '\n';
    }

    std::shared_ptr<const Traced> entry;
    {
      std::lock_guard lock(state->m);
      auto it = state->cache.find(key);
      if (it != state->cache.end()) entry = it->second;
    }
    if (!entry) {
      LeafPolicy policy = [filtered, opname](std::size_t i, const Leaf& l) {
        if (l.is_tensorish()) return LeafUse::Input;
        if (!filtered)
          throw std::invalid_argument(std::string("[") + opname + "] argument " + std::to_string(i) +
                                      " contains a " + l.kind_name() + " leaf");
        return LeafUse::Static;
      };
      Traced tr = trace_with_policy(fn, args, policy, filtered);
      if (!tr.graph.captures.empty())
        throw std::logic_error(std::string("[") + opname + "] top-level trace captured outer values");
      entry = std::make_shared<const Traced>(std::move(tr));
      std::lock_guard lock(state->m);
      state->cache.insert_or_assign(key, entry);
      state->traces++;
    }

    std::vector<Tensor> inputs;
    for (std::size_t a = 0; a < args.size(); ++a)
      for (std::size_t j = 0; j < flats[a].leaves.size(); ++j)
        if (entry->arg_leaf_vars[a][j] >= 0) inputs.push_back(flats[a].leaves[j].tensor());
    std::vector<Tensor> outs = eval_graph(entry->graph, inputs);

    std::vector<Leaf> out_leaves;
    out_leaves.reserve(entry->out_slots.size());
    std::size_t oi = 0;
    for (const OutSlot& slot : entry->out_slots)
      out_leaves.push_back(slot.fixed ? *slot.fixed : Leaf::tensor(outs[oi++]));
    return unflatten(entry->out_structure, out_leaves);
  };
  return TransformedFunction(std::move(impl), state);
}

}  // namespace detail

// Trace once per argument signature (structure + tensor shapes/dtypes), then
// replay the recorded graph. Replay runs the identical kernel sequence, so
// results are bitwise equal to the unjitted call.
inline TransformedFunction jit(TreeFn fn) { return detail::jit_impl(std::move(fn), false); }

}  // namespace treegrad
