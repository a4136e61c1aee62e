#pragma once

// Per-primitive differentiation and batching rules. Both are expressed as
// ordinary value operations, so they work the same whether their operands are
// concrete tensors or tracers of an enclosing trace.

#include <optional>
#include <vector>

#include "trace.hpp"

namespace treegrad {

// Sums a broadcast gradient back down to `target`: reduce the prepended and
// stretched axes, then restore any size-1 dimensions.
inline Leaf unbroadcast(const Leaf& g, const Shape& target) {
  Shape gs = leaf_spec(g).shape;
  if (gs == target) return g;
  std::vector<int> axes;
  std::size_t off = gs.rank() - target.rank();
  for (std::size_t d = 0; d < gs.rank(); ++d) {
    if (d < off)
      axes.push_back(static_cast<int>(d));
    else if (target.dim(d - off) == 1 && gs.dim(d) != 1)
      axes.push_back(static_cast<int>(d));
  }
  Leaf s = axes.empty() ? g : reduce_sum(g, axes);
  if (leaf_spec(s).shape != target) s = reshape(s, target);
  return s;
}

namespace detail {

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) inv[perm[d]] = static_cast<int>(d);
  return inv;
}

// Shape of the input restored after reducing `axes` (reduced dims become 1).
inline Shape reduce_kept_shape(const Shape& in, const std::optional<std::vector<int>>& axes) {
  std::vector<bool> reduced(in.rank(), !axes.has_value());
  if (axes)
    for (int a : *axes) reduced[a] = true;
  std::vector<std::int64_t> dims(in.rank());
  for (std::size_t d = 0; d < in.rank(); ++d) dims[d] = reduced[d] ? 1 : in.dim(d);
  return Shape(std::move(dims));
}

}  // namespace detail

// Cotangent contributions of one equation to each of its arguments.
// Entries are nullopt where the primitive carries no gradient.
inline std::vector<std::optional<Leaf>> vjp_rule(const Equation& eq, std::span<const Leaf> primals,
                                                 const Leaf& ct) {
  const Primitive& p = eq.prim;
  switch (p.op) {
    case PrimOp::Add: {
      Shape sa = leaf_spec(primals[0]).shape, sb = leaf_spec(primals[1]).shape;
      return {unbroadcast(ct, sa), unbroadcast(ct, sb)};
    }
    case PrimOp::Sub: {
      Shape sa = leaf_spec(primals[0]).shape, sb = leaf_spec(primals[1]).shape;
      return {unbroadcast(ct, sa), unbroadcast(neg(ct), sb)};
    }
    case PrimOp::Mul: {
      Shape sa = leaf_spec(primals[0]).shape, sb = leaf_spec(primals[1]).shape;
      return {unbroadcast(mul(ct, primals[1]), sa), unbroadcast(mul(ct, primals[0]), sb)};
    }
    case PrimOp::Div: {
      Shape sa = leaf_spec(primals[0]).shape, sb = leaf_spec(primals[1]).shape;
      Leaf da = unbroadcast(div(ct, primals[1]), sa);
      Leaf db = unbroadcast(neg(div(mul(ct, primals[0]), mul(primals[1], primals[1]))), sb);
      return {da, db};
    }
    case PrimOp::Neg: return {neg(ct)};
    case PrimOp::Relu: {
      // x/(relu(x)+relu(-x)) is +-1 exactly for x != 0 and nan at 0; relu maps
      // the nan to 0, giving the exact subgradient choice relu'(0) = 0.
      const Leaf& x = primals[0];
      Leaf mask = relu(div(x, add(relu(x), relu(neg(x)))));
      return {mul(ct, mask)};
    }
    case PrimOp::MatMul: {
      const Leaf &a = primals[0], &b = primals[1];
      Shape sa = leaf_spec(a).shape, sb = leaf_spec(b).shape;
      std::size_t ra = sa.rank(), rb = sb.rank();
      if (ra == 2 && rb == 2)
        return {matmul(ct, transpose(b, {1, 0})), matmul(transpose(a, {1, 0}), ct)};
      if (ra == 2 && rb == 1) {
        Leaf da = matmul(reshape(ct, {sa.dim(0), 1}), reshape(b, {1, sb.dim(0)}));
        Leaf db = matmul(transpose(a, {1, 0}), ct);
        return {da, db};
      }
      if (ra == 1 && rb == 2) {
        Leaf da = matmul(b, ct);
        Leaf db = matmul(reshape(a, {sa.dim(0), 1}), reshape(ct, {1, sb.dim(1)}));
        return {da, db};
      }
      return {mul(ct, b), mul(ct, a)};  // dot product
    }
    case PrimOp::ReduceSum: {
      Shape sa = leaf_spec(primals[0]).shape;
      Shape kept = detail::reduce_kept_shape(sa, p.axes);
      Leaf g = ct;
      if (leaf_spec(g).shape != kept) g = reshape(g, kept);
      if (leaf_spec(g).shape != sa) g = broadcast_to(g, sa);
      return {g};
    }
    case PrimOp::ReduceMean: {
      Shape sa = leaf_spec(primals[0]).shape;
      Shape kept = detail::reduce_kept_shape(sa, p.axes);
      std::int64_t count = 1;
      for (std::size_t d = 0; d < sa.rank(); ++d)
        if (kept.dim(d) == 1 && sa.dim(d) != 1) count *= sa.dim(d);
      // reduced dims of extent 1 leave count untouched, which is correct
      if (!p.axes)
        count = sa.numel();
      Leaf g = ct;
      if (leaf_spec(g).shape != kept) g = reshape(g, kept);
      if (leaf_spec(g).shape != sa) g = broadcast_to(g, sa);
      return {div(g, Leaf::tensor(Tensor::scalar(static_cast<double>(count))))};
    }
    case PrimOp::BroadcastTo: {
      Shape sa = leaf_spec(primals[0]).shape;
      return {unbroadcast(ct, sa)};
    }
    case PrimOp::Transpose: return {transpose(ct, detail::inverse_perm(p.perm))};
    case PrimOp::Reshape: {
      Shape sa = leaf_spec(primals[0]).shape;
      return {reshape(ct, sa)};
    }
  }
  throw std::logic_error("unreachable");
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// A value during batched interpretation. Batched values always carry the
// exact shape (batch,) + unbatched_shape.
struct BLeaf {
  Leaf v;
  bool batched = false;
};

namespace detail {

// Reshapes a batched value (batch, s...) to (batch, 1..., s...) so that the
// part after the batch axis has `target_rank` dims.
inline Leaf align_batched(const Leaf& v, std::size_t target_rank, std::int64_t batch) {
  Shape s = leaf_spec(v).shape;
  std::size_t rest = s.rank() - 1;
  if (rest == target_rank) return v;
  std::vector<std::int64_t> dims{batch};
  for (std::size_t d = rest; d < target_rank; ++d) dims.push_back(1);
  for (std::size_t d = 0; d < rest; ++d) dims.push_back(s.dim(d + 1));
  return reshape(v, Shape(std::move(dims)));
}

}  // namespace detail

inline BLeaf batching_rule(const Equation& eq, std::span<const BLeaf> args, std::int64_t batch,
                           std::span<const TensorSpec> var_specs) {
  const Primitive& p = eq.prim;
  bool any_batched = false;
  for (const BLeaf& a : args) any_batched |= a.batched;
  if (!any_batched) {
    std::vector<Leaf> raw;
    raw.reserve(args.size());
    for (const BLeaf& a : args) raw.push_back(a.v);
    return {apply_prim(p, raw), false};
  }

  const TensorSpec& out_spec = var_specs[eq.out];
  switch (p.op) {
    case PrimOp::Add:
    case PrimOp::Sub:
    case PrimOp::Mul:
    case PrimOp::Div: {
      Leaf a = args[0].batched ? detail::align_batched(args[0].v, out_spec.shape.rank(), batch) : args[0].v;
      Leaf b = args[1].batched ? detail::align_batched(args[1].v, out_spec.shape.rank(), batch) : args[1].v;
      return {apply_prim(Primitive::simple(p.op), std::array{a, b}), true};
    }
    case PrimOp::Neg: return {neg(args[0].v), true};
    case PrimOp::Relu: return {relu(args[0].v), true};
    case PrimOp::MatMul: {
      const Shape& sa = var_specs[eq.args[0]].shape;
      const Shape& sb = var_specs[eq.args[1]].shape;
      std::size_t ra = sa.rank(), rb = sb.rank();
      const Leaf &a = args[0].v, &b = args[1].v;
      if (args[0].batched && !args[1].batched) {
        if (ra == 1) return {matmul(a, b), true};  // (B,k) x (k,...) keeps the batch rows
        std::int64_t m = sa.dim(0), k = sa.dim(1);
        Leaf r = matmul(reshape(a, {batch * m, k}), b);
        if (rb == 1) return {reshape(r, {batch, m}), true};
        return {reshape(r, {batch, m, sb.dim(1)}), true};
      }
      if (!args[0].batched && args[1].batched) {
        if (rb == 1) {
          if (ra == 1) return {matmul(b, a), true};  // per-row dot
          // rows of the batch stay the left operand: (B,k) x (k,m)
          return {matmul(b, transpose(a, {1, 0})), true};
        }
        if (ra == 1) {
          Leaf a2 = reshape(a, {sa.dim(0), 1});
          return {reduce_sum(mul(b, a2), std::vector<int>{1}), true};
        }
        std::int64_t m = sa.dim(0), k = sb.dim(0), n = sb.dim(1);
        Leaf flat = reshape(transpose(b, {0, 2, 1}), {batch * n, k});
        Leaf r = matmul(flat, transpose(a, {1, 0}));
        return {transpose(reshape(r, {batch, n, m}), {0, 2, 1}), true};
      }
      // both batched: contract via broadcasting multiply + sum
      if (ra == 1 && rb == 1) return {reduce_sum(mul(a, b), std::vector<int>{1}), true};
      if (ra == 1 && rb == 2) {
        Leaf a3 = reshape(a, {batch, sa.dim(0), 1});
        return {reduce_sum(mul(a3, b), std::vector<int>{1}), true};
      }
      if (ra == 2 && rb == 1) {
        Leaf b3 = reshape(b, {batch, 1, sb.dim(0)});
        return {reduce_sum(mul(a, b3), std::vector<int>{2}), true};
      }
      Leaf a4 = reshape(a, {batch, sa.dim(0), sa.dim(1), 1});
      Leaf b4 = reshape(b, {batch, 1, sb.dim(0), sb.dim(1)});
      return {reduce_sum(mul(a4, b4), std::vector<int>{2}), true};
    }
    case PrimOp::ReduceSum:
    case PrimOp::ReduceMean: {
      std::size_t in_rank = var_specs[eq.args[0]].shape.rank();
      std::vector<int> axes;
      if (p.axes)
        for (int ax : *p.axes) axes.push_back(ax + 1);
      else
        for (std::size_t d = 0; d < in_rank; ++d) axes.push_back(static_cast<int>(d) + 1);
      return {apply_prim(Primitive::reduce(p.op, axes), std::array{args[0].v}), true};
    }
    case PrimOp::BroadcastTo: {
      Leaf v = detail::align_batched(args[0].v, p.shape.rank(), batch);
      std::vector<std::int64_t> dims{batch};
      for (std::size_t d = 0; d < p.shape.rank(); ++d) dims.push_back(p.shape.dim(d));
      return {broadcast_to(v, Shape(std::move(dims))), true};
    }
    case PrimOp::Transpose: {
      std::vector<int> perm{0};
      for (int d : p.perm) perm.push_back(d + 1);
      return {transpose(args[0].v, std::move(perm)), true};
    }
    case PrimOp::Reshape: {
      std::vector<std::int64_t> dims{batch};
      for (std::size_t d = 0; d < p.shape.rank(); ++d) dims.push_back(p.shape.dim(d));
      return {reshape(args[0].v, Shape(std::move(dims))), true};
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace treegrad
