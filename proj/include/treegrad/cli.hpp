#pragma once

// Command line front end. All output goes through the streams handed to
// run_cli so the whole tool is testable in-process. Given the same arguments
// the output is byte-for-byte reproducible.

#include <CLI11.hpp>

#include <ostream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "nn.hpp"

namespace treegrad {

namespace detail {

inline double scalar_loss(const PyTree& t) { return tree_leaf(t).tensor().f64()[0]; }

inline PyTree demo_model(std::uint64_t seed) {
  std::vector<PrngKey> ks = key_split(key_new(seed), 3);
  return mlp_init(ks[2]).tree();
}

}  // namespace detail

// Returns the process exit code: 0 on success, 1 for runtime failures, 2 for
// bad command lines.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tree-structured autodiff playground"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  int steps = 200;
  double lr = 0.1;
  std::string ckpt_out;
  std::string ckpt_path;
  std::string target;
  int batch = 100;

  CLI::App* train = app.add_subcommand("train", "fit the demo MLP to synthetic data");
  train->add_option("--seed", seed, "PRNG seed for data and parameters");
  train->add_option("--steps", steps, "number of SGD steps")->check(CLI::NonNegativeNumber);
  train->add_option("--lr", lr, "learning rate")->check(CLI::NonNegativeNumber);
  train->add_option("--ckpt-out", ckpt_out, "write the trained model here");
  train->callback([&] {
    std::vector<PrngKey> ks = key_split(key_new(seed), 3);
    PyTree x = PyTree::tensor(normal(ks[0], Shape({100, 2})));
    PyTree y = PyTree::tensor(normal(ks[1], Shape({100, 2})));
    PyTree model = mlp_init(ks[2]).tree();
    TransformedFunction loss = filter_jit(batched_mse_loss);
    TransformedFunction grad_fn = filter_jit(filter_grad(batched_mse_loss));
    out << "initial_loss=" << fmt_double(detail::scalar_loss(loss({model, x, y}))) << "\n";
    for (int i = 0; i < steps; ++i) {
      PyTree grads = grad_fn({model, x, y});
      model = sgd_step(model, grads, lr);
    }
    out << "final_loss=" << fmt_double(detail::scalar_loss(loss({model, x, y}))) << "\n";
    if (!ckpt_out.empty()) save_checkpoint_file(ckpt_out, model);
  });

  CLI::App* dump = app.add_subcommand("trace-dump", "print the recorded graph for a program");
  dump->add_option("--target", target, "which program to trace")
      ->required()
      ->check(CLI::IsMember({"forward", "loss"}));
  dump->add_option("--batch", batch, "batch size of the example input")->check(CLI::PositiveNumber);
  dump->add_option("--seed", seed, "PRNG seed for the model parameters");
  dump->callback([&] {
    PyTree model = detail::demo_model(seed);
    PyTree x = PyTree::tensor(Tensor::zeros(Shape({batch, 2})));
    if (target == "forward") {
      TreeFn f = [&model](std::span<const PyTree> a) {
        TreeFn fwd = [](std::span<const PyTree> b) { return call_tree(b[0], b.subspan(1)); };
        return vmap(fwd, {AxisSpec::none(), AxisSpec::all_leading()})({model, a[0]});
      };
      std::vector<PyTree> ex{x};
      out << format_graph(trace(f, ex));
    } else {
      PyTree y = PyTree::tensor(Tensor::zeros(Shape({batch, 2})));
      LeafPolicy policy = [](std::size_t, const Leaf& l) {
        return l.is_tensorish() ? LeafUse::Input : LeafUse::Static;
      };
      std::vector<PyTree> ex{model, x, y};
      out << format_graph(trace_with_policy(batched_mse_loss, ex, policy, true).graph);
    }
  });

  CLI::App* ckpt = app.add_subcommand("ckpt", "checkpoint utilities");
  ckpt->require_subcommand(1);
  CLI::App* csave = ckpt->add_subcommand("save", "write a freshly initialised model");
  csave->add_option("path", ckpt_path, "output file")->required();
  csave->add_option("--seed", seed, "PRNG seed for the model parameters");
  csave->callback([&] { save_checkpoint_file(ckpt_path, detail::demo_model(seed)); });
  CLI::App* cload = ckpt->add_subcommand("load", "read a checkpoint and print its structure");
  cload->add_option("path", ckpt_path, "input file")->required();
  cload->callback([&] { out << flatten(load_checkpoint_file(ckpt_path)).structure.text() << "\n"; });

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("treegrad");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace treegrad
