#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <unistd.h>

#include "oracles.hpp"

using namespace treegrad;
using Catch::Matchers::ContainsSubstring;

// One line per criterion so the suite reads as a checklist.
namespace {

class CriterionReporter : public Catch::EventListenerBase {
 public:
  using Catch::EventListenerBase::EventListenerBase;
  void testCaseEnded(const Catch::TestCaseStats& stats) override {
    std::cout << (stats.totals.assertions.allPassed() ? "[PASS] " : "[FAIL] ")
              << stats.testInfo->name << std::endl;
  }
};

PyTree tleaf(Tensor t) { return PyTree::tensor(std::move(t)); }

double loss_value(const PyTree& model, const PyTree& x, const PyTree& y) {
  std::vector<PyTree> args{model, x, y};
  return tree_leaf(batched_mse_loss(args)).tensor().f64()[0];
}

}  // namespace

CATCH_REGISTER_LISTENER(CriterionReporter)

TEST_CASE("criterion 1: filtered gradients match central finite differences") {
  PyTree model = mlp_init(key_new(0)).tree();
  PyTree x = tleaf(normal(key_new(100), Shape{4, 2}));
  PyTree y = tleaf(normal(key_new(101), Shape{4, 2}));

  PyTree g = filter_grad(batched_mse_loss)({model, x, y});
  Flattened fm = flatten(model);
  Flattened fg = flatten(g);
  REQUIRE(fg.structure == fm.structure);

  const double eps = 1e-5;
  const double rtol = 1e-4;
  for (std::size_t i = 0; i < fm.leaves.size(); ++i) {
    if (!fg.leaves[i].is_tensor()) continue;
    const Tensor& base = fm.leaves[i].tensor();
    const Tensor& gi = fg.leaves[i].tensor();
    REQUIRE(gi.shape() == base.shape());
    for (std::size_t j = 0; j < base.f64().size(); ++j) {
      auto eval_at = [&](double v) {
        std::vector<double> vals(base.f64().begin(), base.f64().end());
        vals[j] = v;
        std::vector<Leaf> leaves = fm.leaves;
        leaves[i] = Leaf::tensor(Tensor::from_f64(base.shape(), std::move(vals)));
        return loss_value(unflatten(fm.structure, leaves), x, y);
      };
      double fd = (eval_at(base.f64()[j] + eps) - eval_at(base.f64()[j] - eps)) / (2 * eps);
      double analytic = gi.f64()[j];
      double scale = std::max({1.0, std::fabs(fd), std::fabs(analytic)});
      REQUIRE(std::fabs(analytic - fd) <= rtol * scale);
    }
  }
}

TEST_CASE("criterion 2: module gradients share the module's structure") {
  const ModuleSchema& shift = define_schema(
      "shift", {{"parameter", FieldSpec::Kind::Child}},
      [](std::span<const PyTree> args) {
        ModuleValue self = ModuleValue::wrap(args[0]);
        return PyTree::leaf(add(tree_leaf(self.child("parameter")), tree_leaf(args[1])));
      });
  ModuleValue m = instantiate(shift, {{"parameter", tleaf(Tensor::scalar(0.25))}});

  TreeFn apply = [](std::span<const PyTree> args) { return call_tree(args[0], {args[1]}); };
  PyTree g = grad(apply)({m.tree(), tleaf(Tensor::scalar(3.0))});

  REQUIRE(flatten(g).structure == flatten(m.tree()).structure);
  ModuleValue gm = ModuleValue::wrap(g);
  REQUIRE(tree_leaf(gm.child("parameter")).tensor().f64()[0] == 1.0);
}

TEST_CASE("criterion 3: the batched network matches the loop and uses one matrix product per layer") {
  PyTree model = mlp_init(key_new(1)).tree();
  const std::int64_t B = 16;
  Tensor xs = normal(key_new(102), Shape{B, 2});

  TreeFn fwd = [](std::span<const PyTree> args) { return call_tree(args[0], args.subspan(1)); };
  TransformedFunction batched = vmap(fwd, {AxisSpec::none(), AxisSpec::all_leading()});

  PyTree got = batched({model, tleaf(xs)});
  PyTree want = oracles::vmap_ref(fwd, {model, tleaf(xs)}, {false, true}, B);
  const Tensor& tg = tree_leaf(got).tensor();
  const Tensor& tw = tree_leaf(want).tensor();
  REQUIRE(tg.shape() == tw.shape());
  for (std::size_t i = 0; i < tg.f64().size(); ++i)
    REQUIRE(std::fabs(tg.f64()[i] - tw.f64()[i]) <=
            1e-12 * std::max({1.0, std::fabs(tg.f64()[i]), std::fabs(tw.f64()[i])}));

  // two linear layers, so exactly two matrix products, batch rows on the left
  TreeFn graph_fn = [&model, &batched](std::span<const PyTree> a) {
    return batched({model, a[0]});
  };
  Graph g = trace(graph_fn, std::array{tleaf(xs)});
  std::size_t matmuls = 0;
  for (const Equation& eq : g.equations) {
    if (eq.prim.op != PrimOp::MatMul) continue;
    ++matmuls;
    REQUIRE(g.vars[eq.args[0]].shape.rank() == 2);
    REQUIRE(g.vars[eq.args[0]].shape.dim(0) == B);
  }
  REQUIRE(matmuls == 2);
}

TEST_CASE("criterion 4: compiled functions replay bit for bit and reuse their cache") {
  TreeFn f = [](std::span<const PyTree> args) {
    Leaf x = tree_leaf(args[0]);
    Leaf w = tree_leaf(args[1]);
    return PyTree::leaf(reduce_mean(mul(relu(matmul(x, w)), x)));
  };
  TransformedFunction jf = jit(f);

  Tensor x1 = normal(key_new(103), Shape{8, 2});
  Tensor x2 = normal(key_new(104), Shape{8, 2});
  Tensor w = normal(key_new(105), Shape{2, 2});

  std::vector<PyTree> a1{tleaf(x1), tleaf(w)}, a2{tleaf(x2), tleaf(w)};
  PyTree r1 = jf(a1);
  PyTree r2 = jf(a2);
  REQUIRE(jf.trace_count() == 1);
  REQUIRE(tree_leaf(r1).tensor().bitwise_equal(tree_leaf(f(a1)).tensor()));
  REQUIRE(tree_leaf(r2).tensor().bitwise_equal(tree_leaf(f(a2)).tensor()));

  std::vector<PyTree> a3{tleaf(normal(key_new(106), Shape{4, 2})), tleaf(w)};
  PyTree r3 = jf(a3);
  REQUIRE(jf.trace_count() == 2);
  REQUIRE(tree_leaf(r3).tensor().bitwise_equal(tree_leaf(f(a3)).tensor()));
}

TEST_CASE("criterion 5: compiling a gradient changes nothing about its values") {
  PyTree model = mlp_init(key_new(2)).tree();
  PyTree x = tleaf(normal(key_new(107), Shape{6, 2}));
  PyTree y = tleaf(normal(key_new(108), Shape{6, 2}));

  PyTree direct = filter_grad(batched_mse_loss)({model, x, y});
  TransformedFunction compiled = filter_jit(filter_grad(batched_mse_loss).fn());
  PyTree first = compiled({model, x, y});
  PyTree second = compiled({model, x, y});
  REQUIRE(compiled.trace_count() == 1);

  Flattened fd = flatten(direct), f1 = flatten(first), f2 = flatten(second);
  REQUIRE(fd.structure == f1.structure);
  REQUIRE(fd.structure == f2.structure);
  for (std::size_t i = 0; i < fd.leaves.size(); ++i) {
    if (fd.leaves[i].is_sentinel()) {
      REQUIRE(f1.leaves[i].is_sentinel());
      REQUIRE(f2.leaves[i].is_sentinel());
    } else {
      REQUIRE(f1.leaves[i].tensor().bitwise_equal(fd.leaves[i].tensor()));
      REQUIRE(f2.leaves[i].tensor().bitwise_equal(fd.leaves[i].tensor()));
    }
  }

  // all-tensor arguments work through the unfiltered pair as well
  TreeFn sq = [](std::span<const PyTree> args) {
    Leaf v = tree_leaf(args[0]);
    return PyTree::leaf(reduce_sum(mul(v, v)));
  };
  PyTree v = tleaf(normal(key_new(109), Shape{5}));
  PyTree gd = grad(sq)({v});
  TransformedFunction gj = jit(grad(sq).fn());
  REQUIRE(tree_leaf(gj({v})).tensor().bitwise_equal(tree_leaf(gd).tensor()));
  REQUIRE(tree_leaf(gj({v})).tensor().bitwise_equal(tree_leaf(gd).tensor()));
  REQUIRE(gj.trace_count() == 1);
}

TEST_CASE("criterion 6: partition and combine invert each other on a thousand random trees") {
  oracles::Rng rng(91);
  oracles::register_test_kinds();
  int done = 0;
  for (int iter = 0; iter < 1000; ++iter) {
    PyTree t = oracles::rand_tree(rng, 0);
    const LeafPredicate& pred = iter % 2 ? is_array() : is_inexact_array();
    auto [matched, rest] = partition(t, pred);
    REQUIRE(tree_equal(combine(matched, rest), t));
    ++done;
  }
  REQUIRE(done == 1000);
}

TEST_CASE("criterion 7: non-tensor leaves come back as placeholders exactly where they were") {
  PyTree model = mlp_init(key_new(3)).tree();
  PyTree x = tleaf(normal(key_new(110), Shape{4, 2}));
  PyTree y = tleaf(normal(key_new(111), Shape{4, 2}));
  PyTree g = filter_grad(batched_mse_loss)({model, x, y});

  Flattened fm = flatten(model);
  Flattened fg = flatten(g);
  REQUIRE(fg.leaves.size() == 6);
  REQUIRE(fm.leaves[4].is_function());  // the activation is the only non-tensor leaf
  for (std::size_t i = 0; i < fg.leaves.size(); ++i) {
    if (i == 4)
      REQUIRE(fg.leaves[i].is_sentinel());
    else
      REQUIRE(fg.leaves[i].is_tensor());
  }
}

TEST_CASE("criterion 8: frozen parameters stay bit-identical while the rest train") {
  PyTree model = mlp_init(key_new(4)).tree();
  Flattened fm = flatten(model);
  const void* frozen_buf = fm.leaves[0].tensor().buffer_id();
  LeafPredicate frozen{"frozen", [frozen_buf](const Leaf& l) {
                         return l.is_tensor() && l.tensor().buffer_id() == frozen_buf;
                       }};
  auto [fixed, trainable] = partition(model, frozen);

  TreeFn loss = [&fixed](std::span<const PyTree> args) {
    std::vector<PyTree> real{combine(args[0], fixed), args[1], args[2]};
    return batched_mse_loss(real);
  };
  PyTree x = tleaf(normal(key_new(112), Shape{8, 2}));
  PyTree y = tleaf(normal(key_new(113), Shape{8, 2}));

  PyTree params = trainable;
  for (int step = 0; step < 10; ++step) {
    PyTree g = filter_grad(loss)({params, x, y});
    params = sgd_step(params, g, 0.05);
  }

  PyTree final_model = combine(params, fixed);
  Flattened ff = flatten(final_model);
  REQUIRE(ff.leaves[0].tensor().bitwise_equal(fm.leaves[0].tensor()));  // frozen weight
  for (std::size_t i : {std::size_t{1}, std::size_t{2}, std::size_t{3}, std::size_t{5}})
    REQUIRE_FALSE(ff.leaves[i].tensor().bitwise_equal(fm.leaves[i].tensor()));
}

TEST_CASE("criterion 9: the training command is deterministic and learns") {
  std::vector<std::string> args{"train", "--seed", "0", "--steps", "200", "--lr", "0.1"};
  std::ostringstream out1, err1, out2, err2;
  REQUIRE(run_cli(args, out1, err1) == 0);
  REQUIRE(run_cli(args, out2, err2) == 0);
  REQUIRE(out1.str() == out2.str());

  std::string text = out1.str();
  double initial = std::stod(text.substr(text.find("initial_loss=") + 13));
  double final_loss = std::stod(text.substr(text.find("final_loss=") + 11));
  REQUIRE(final_loss < 0.5 * initial);
}

TEST_CASE("criterion 10: binding a method adds no leaves to the tree") {
  ModuleValue m = mlp_init(key_new(6));
  PyTree bound = bind_method(m, "call");
  Flattened fb = flatten(bound);
  Flattened fm = flatten(m.tree());
  REQUIRE(fb.leaves.size() == fm.leaves.size());
  for (std::size_t i = 0; i < fb.leaves.size(); ++i)
    REQUIRE(leaf_equal(fb.leaves[i], fm.leaves[i]));

  // and the bound tree still runs the method
  PyTree x = tleaf(Tensor::from_f64(Shape{2}, {0.5, -0.25}));
  REQUIRE(tree_leaf(call_tree(bound, {x}))
              .tensor()
              .bitwise_equal(tree_leaf(call_tree(m.tree(), {x})).tensor()));
}

TEST_CASE("criterion 11: checkpoints restore models exactly and reject corruption") {
  PyTree model = mlp_init(key_new(12)).tree();
  auto path = std::filesystem::temp_directory_path() /
              ("acceptance-" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint_file(path.string(), model);
  PyTree back = load_checkpoint_file(path.string());
  REQUIRE(tree_equal(back, model));

  PyTree x = tleaf(Tensor::from_f64(Shape{2}, {1.0, 2.0}));
  REQUIRE(tree_leaf(call_tree(back, {x}))
              .tensor()
              .bitwise_equal(tree_leaf(call_tree(model, {x})).tensor()));

  std::ostringstream os;
  save_checkpoint(os, model);
  std::string text = os.str();
  std::size_t pos = text.find("leaf 2") + 12;
  text[pos] = text[pos] == 'f' ? 'e' : 'f';
  std::istringstream is(text);
  REQUIRE_THROWS_WITH(load_checkpoint(is),
                      ContainsSubstring("[checkpoint] checksum mismatch (corrupt file)"));
  std::filesystem::remove(path);
}
