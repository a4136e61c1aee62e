#pragma once

// Neural-network layer kit: a counter-based splitmix64 PRNG, linear and MLP
// module schemas, a batched mean-squared-error loss and an SGD update. Keys
// are value types; splitting never mutates the parent, so the same seed
// always reproduces the same parameters and data.

#include <cmath>
#include <cstdint>
#include <numbers>

#include "filter.hpp"
#include "module.hpp"
#include "transforms.hpp"

namespace treegrad {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ull;

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

struct PrngKey {
  std::uint64_t state = 0;
  std::uint64_t gamma = kGoldenGamma;

  friend bool operator==(const PrngKey&, const PrngKey&) = default;
};

inline PrngKey key_new(std::uint64_t seed) { return PrngKey{mix64(seed + kGoldenGamma), kGoldenGamma}; }

inline std::vector<PrngKey> key_split(const PrngKey& key, std::size_t n) {
  if (n == 0) throw std::invalid_argument("[key_split] cannot split into zero keys");
  std::vector<PrngKey> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(PrngKey{mix64(key.state + (std::uint64_t(i) + 1) * key.gamma), key.gamma});
  return out;
}

// j-th raw draw from a key; pure in (key, j).
inline std::uint64_t key_draw(const PrngKey& key, std::uint64_t j) {
  return mix64(key.state + (j + 1) * key.gamma);
}

// Uniform in [0, 1): top 53 bits of the draw.
inline Tensor uniform(const PrngKey& key, const Shape& shape) {
  std::vector<double> vals(static_cast<std::size_t>(shape.numel()));
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<double>(key_draw(key, i) >> 11) * 0x1.0p-53;
  return Tensor::from_f64(shape, vals);
}

// Standard normal via Box-Muller. u1 is nudged into (0, 1] so log(u1) is
// finite; each pair of draws yields two values, the last is dropped for odd
// element counts.
inline Tensor normal(const PrngKey& key, const Shape& shape) {
  std::vector<double> vals(static_cast<std::size_t>(shape.numel()));
  for (std::size_t p = 0; p * 2 < vals.size(); ++p) {
    double u1 = static_cast<double>((key_draw(key, 2 * p) >> 11) + 1) * 0x1.0p-53;
    double u2 = static_cast<double>(key_draw(key, 2 * p + 1) >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * std::numbers::pi * u2;
    vals[2 * p] = r * std::cos(t);
    if (2 * p + 1 < vals.size()) vals[2 * p + 1] = r * std::sin(t);
  }
  return Tensor::from_f64(shape, vals);
}

// "relu" as a named function so it can live inside a tree as a leaf.
inline const FunctionRef& relu_ref() {
  static const FunctionRef ref = register_function("relu", [](std::span<const PyTree> args) {
    if (args.size() != 1) throw std::invalid_argument("[relu] expects one argument");
    return PyTree::leaf(relu(tree_leaf(args[0])));
  });
  return ref;
}

// y = W x + b with W of shape (out, in), b of shape (out,).
inline const ModuleSchema& linear_schema() {
  static const ModuleSchema& schema = define_schema(
      "linear", {{"weight", FieldSpec::Kind::Child}, {"bias", FieldSpec::Kind::Child}},
      [](std::span<const PyTree> args) {
        if (args.size() != 2) throw std::invalid_argument("[linear] expects one input");
        const Leaf& w = tree_leaf(args[0].children()[0]);
        const Leaf& b = tree_leaf(args[0].children()[1]);
        return PyTree::leaf(add(matmul(w, tree_leaf(args[1])), b));
      });
  return schema;
}

// Weight and bias drawn from U(-1/sqrt(in), 1/sqrt(in)).
inline ModuleValue linear_init(std::int64_t in_features, std::int64_t out_features, const PrngKey& key) {
  if (in_features <= 0 || out_features <= 0)
    throw std::invalid_argument("[linear_init] feature counts must be positive");
  double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  std::vector<PrngKey> ks = key_split(key, 2);
  auto draw_tensor = [bound](const PrngKey& k, const Shape& shape) {
    Tensor u = uniform(k, shape);
    Tensor two_b = Tensor::full(shape, 2.0 * bound);
    Tensor b = Tensor::full(shape, bound);
    return sub(mul(u, two_b), b);
  };
  return instantiate(linear_schema(),
                     {{"weight", PyTree::tensor(draw_tensor(ks[0], Shape({out_features, in_features})))},
                      {"bias", PyTree::tensor(draw_tensor(ks[1], Shape({out_features})))}});
}

// Stack of linear layers with an activation between them and a learned bias
// added to the final output.
inline const ModuleSchema& mlp_schema() {
  static const ModuleSchema& schema = define_schema(
      "mlp",
      {{"layers", FieldSpec::Kind::Child},
       {"activation", FieldSpec::Kind::Child},
       {"bias", FieldSpec::Kind::Child}},
      [](std::span<const PyTree> args) {
        if (args.size() != 2) throw std::invalid_argument("[mlp] expects one input");
        const PyTree& layers = args[0].children()[0];
        const Leaf& act = tree_leaf(args[0].children()[1]);
        const Leaf& bias = tree_leaf(args[0].children()[2]);
        if (!act.is_function()) throw std::invalid_argument("[mlp] activation must be a function leaf");
        if (layers.children().empty()) throw std::invalid_argument("[mlp] needs at least one layer");
        PyTree h = args[1];
        for (std::size_t i = 0; i + 1 < layers.children().size(); ++i) {
          h = call_tree(layers.children()[i], {h});
          h = invoke(act.function_ref(), {h});
        }
        h = call_tree(layers.children().back(), {h});
        return PyTree::leaf(add(tree_leaf(h), bias));
      });
  return schema;
}

namespace detail {

// Checkpoints holding these nodes must load in any program that links the nn
// layer, so the schemas register at static-init time, not on first use.
inline const bool nn_schemas_registered = [] {
  relu_ref();
  linear_schema();
  mlp_schema();
  return true;
}();

}  // namespace detail

// 2 -> 8 -> 2 network with relu and a ones bias, as used by the CLI trainer.
inline ModuleValue mlp_init(const PrngKey& key) {
  std::vector<PrngKey> ks = key_split(key, 2);
  std::vector<PyTree> layers;
  layers.push_back(linear_init(2, 8, ks[0]).tree());
  layers.push_back(linear_init(8, 2, ks[1]).tree());
  return instantiate(mlp_schema(), {{"layers", PyTree::seq(std::move(layers))},
                                    {"activation", PyTree::function(relu_ref())},
                                    {"bias", PyTree::tensor(Tensor::ones(Shape({2})))}});
}

// mean over all elements of (y - vmap(model)(x))^2. args = (model, x, y);
// model rides along as a tree so gradients flow into its parameters.
inline PyTree batched_mse_loss(std::span<const PyTree> args) {
  if (args.size() != 3) throw std::invalid_argument("[batched_mse_loss] expects (model, x, y)");
  TreeFn fwd = [](std::span<const PyTree> a) { return call_tree(a[0], a.subspan(1)); };
  TransformedFunction batched = vmap(fwd, {AxisSpec::none(), AxisSpec::all_leading()});
  PyTree pred = batched({args[0], args[1]});
  Leaf d = sub(tree_leaf(args[2]), tree_leaf(pred));
  return PyTree::leaf(reduce_mean(mul(d, d), std::nullopt));
}

// One SGD step: p <- p - lr * g. Sentinel gradient leaves (non-differentiable
// positions) leave the parameter untouched.
inline PyTree sgd_step(const PyTree& params, const PyTree& grads, double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("[sgd_step] learning rate must be non-negative");
  Flattened fp = flatten(params);
  Flattened fg = flatten(grads);
  if (!(fp.structure == fg.structure))
    throw std::invalid_argument("[sgd_step] structure mismatch: " + fp.structure.text() + " vs " +
                                fg.structure.text());
  Leaf rate = Leaf::tensor(Tensor::scalar(lr));
  std::vector<Leaf> out;
  out.reserve(fp.leaves.size());
  for (std::size_t i = 0; i < fp.leaves.size(); ++i) {
    if (fg.leaves[i].is_sentinel()) {
      out.push_back(fp.leaves[i]);
      continue;
    }
    if (!fg.leaves[i].is_tensorish())
      throw std::invalid_argument("[sgd_step] gradient leaf " + leaf_path(fp.structure, i) +
                                  " is a " + std::string(fg.leaves[i].kind_name()) + ", not a tensor");
    out.push_back(sub(fp.leaves[i], mul(rate, fg.leaves[i])));
  }
  return unflatten(fp.structure, out);
}

}  // namespace treegrad
