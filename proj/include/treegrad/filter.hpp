#pragma once

// Leaf filtering: split a tree into a half that satisfies a predicate and its
// complement, both structure-preserving with Sentinel placeholders, and the
// filtered transformations built on top of that split. This is how trees that
// mix tensors with arbitrary static data meet grad and jit, which only accept
// tensors.

#include <functional>
#include <string>
#include <utility>

#include "transforms.hpp"

namespace treegrad {

struct LeafPredicate {
  std::string name;
  std::function<bool(const Leaf&)> fn;
  bool operator()(const Leaf& l) const { return fn(l); }
};

inline const LeafPredicate& is_array() {
  static const LeafPredicate p{"is_array", [](const Leaf& l) { return l.is_tensorish(); }};
  return p;
}

inline const LeafPredicate& is_inexact_array() {
  static const LeafPredicate p{"is_inexact_array", [](const Leaf& l) {
                                 return l.is_tensorish() && leaf_spec(l).dtype == DType::F64;
                               }};
  return p;
}

// (matching half, complement half); both share the input's structure, with
// Sentinel standing in for leaves that went to the other half.
inline std::pair<PyTree, PyTree> partition(const PyTree& t, const LeafPredicate& pred) {
  Flattened flat = flatten(t);
  std::vector<Leaf> matched = flat.leaves;
  std::vector<Leaf> rest = flat.leaves;
  for (std::size_t i = 0; i < flat.leaves.size(); ++i) {
    if (pred(flat.leaves[i]))
      rest[i] = Leaf::sentinel();
    else
      matched[i] = Leaf::sentinel();
  }
  return {unflatten(flat.structure, matched), unflatten(flat.structure, rest)};
}

// Inverse of partition: at every position takes whichever side is not a
// Sentinel. Two non-Sentinel leaves at the same position are an error.
inline PyTree combine(const PyTree& a, const PyTree& b) {
  Flattened fa = flatten(a);
  Flattened fb = flatten(b);
  if (fa.structure != fb.structure)
    throw std::invalid_argument("[combine] structure mismatch: " + fa.structure.text() + " vs " +
                                fb.structure.text());
  for (std::size_t i = 0; i < fa.leaves.size(); ++i) {
    if (fa.leaves[i].is_sentinel()) {
      fa.leaves[i] = fb.leaves[i];
    } else if (!fb.leaves[i].is_sentinel()) {
      throw std::invalid_argument("[combine] leaf " + leaf_path(fa.structure, i) +
                                  " is present on both sides");
    }
  }
  return unflatten(fa.structure, fa.leaves);
}

// grad over the f64-tensor half of the first argument; everything else passes
// through statically and comes back as Sentinel in the gradient tree, which
// therefore shares the argument's structure.
inline TransformedFunction filter_grad(TreeFn fn) {
  return TransformedFunction([fn = std::move(fn)](std::span<const PyTree> args) -> PyTree {
    if (args.empty()) throw std::invalid_argument("[filter_grad] at least one argument is required");
    auto split = partition(args[0], is_inexact_array());
    PyTree params = std::move(split.first);
    PyTree statics = std::move(split.second);
    TreeFn inner = [fn, statics](std::span<const PyTree> inner_args) {
      std::vector<PyTree> real(inner_args.begin(), inner_args.end());
      real[0] = combine(real[0], statics);
      return fn(real);
    };
    std::vector<PyTree> outer(args.begin(), args.end());
    outer[0] = params;
    return detail::grad_impl(inner, outer, true).grads;
  });
}

// jit keyed on every argument's structure, tensor specs and the identity of
// its static leaves; static leaves (inputs and outputs) bypass the graph.
inline TransformedFunction filter_jit(TreeFn fn) { return detail::jit_impl(std::move(fn), true); }

}  // namespace treegrad
