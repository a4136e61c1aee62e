#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"

using namespace treegrad;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("leaf kinds and accessors") {
  Leaf t = Leaf::tensor(Tensor::ones(Shape{2}));
  Leaf i = Leaf::scalar_int(4);
  Leaf f = Leaf::scalar_float(2.5);
  Leaf b = Leaf::scalar_bool(true);
  Leaf fn = Leaf::function(FunctionRef{"relu"});
  Leaf o = Leaf::opaque(Opaque::fresh());
  Leaf s = Leaf::sentinel();
  CHECK(t.is_tensor());
  CHECK(t.is_tensorish());
  CHECK(!i.is_tensorish());
  CHECK(i.scalar_int_value() == 4);
  CHECK(f.scalar_float_value() == 2.5);
  CHECK(b.scalar_bool_value());
  CHECK(fn.function_ref().name == "relu");
  CHECK(s.is_sentinel());
  CHECK(std::string(t.kind_name()) == "tensor");
  CHECK(std::string(i.kind_name()) == "scalar int");
  CHECK(std::string(o.kind_name()) == "opaque");
  REQUIRE_THROWS_WITH(i.tensor(), ContainsSubstring("expected a tensor, got scalar int"));
  CHECK(leaf_spec(t).str() == "(2,) f64");
  REQUIRE_THROWS_WITH(leaf_spec(s), ContainsSubstring("has no tensor shape"));
}

TEST_CASE("leaf equality semantics") {
  CHECK(leaf_equal(Leaf::tensor(Tensor::ones(Shape{2})), Leaf::tensor(Tensor::ones(Shape{2}))));
  CHECK(!leaf_equal(Leaf::tensor(Tensor::ones(Shape{2})), Leaf::tensor(Tensor::ones(Shape{1, 2}))));
  CHECK(!leaf_equal(Leaf::scalar_float(0.0), Leaf::scalar_float(-0.0)));  // bit comparison
  double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK(leaf_equal(Leaf::scalar_float(nan), Leaf::scalar_float(nan)));
  Opaque a = Opaque::fresh(), b = Opaque::fresh();
  CHECK(leaf_equal(Leaf::opaque(a), Leaf::opaque(a)));
  CHECK(!leaf_equal(Leaf::opaque(a), Leaf::opaque(b)));  // identity, not content
  CHECK(!leaf_equal(Leaf::scalar_int(1), Leaf::scalar_float(1.0)));
}

TEST_CASE("static value rendering") {
  CHECK(StaticValue::none().render() == "none");
  CHECK(StaticValue::of(true).render() == "true");
  CHECK(StaticValue::of_int(-7).render() == "-7");
  CHECK(StaticValue::of_float(2.5).render() == "2.5");
  CHECK(StaticValue::of_float(2.0).render() == "2.0");  // float marker kept
  CHECK(StaticValue::of_float(1e100).render() == "1e+100");
  CHECK(StaticValue::of_string("a b").render() == "\"a b\"");
  CHECK(StaticValue::of_string("q\"\n").render() == "\"q\\\"\\n\"");
  CHECK(StaticValue::of(FunctionRef{"relu"}).render() == "fn<relu>");
  CHECK(StaticValue::of(Opaque{9}).render() == "opaque<9>");
  CHECK(StaticValue::list({StaticValue::of_int(1), StaticValue::of_int(2)}).render() == "[1,2]");
  CHECK(StaticValue::fields({{"a", StaticValue::of_int(1)}, {"b c", StaticValue::none()}}).render() ==
        "{a=1,\"b c\"=none}");
  CHECK(StaticValue::fields({}).render() == "{}");
}

TEST_CASE("static value parse round trip") {
  auto rt = [](const StaticValue& v) {
    StaticValue back = StaticValue::parse(v.render());
    CHECK(back == v);
    CHECK(back.render() == v.render());
  };
  rt(StaticValue::none());
  rt(StaticValue::of(false));
  rt(StaticValue::of_int(123456789));
  rt(StaticValue::of_float(-0.0));
  rt(StaticValue::of_float(std::numeric_limits<double>::infinity()));
  rt(StaticValue::of_float(-std::numeric_limits<double>::infinity()));
  rt(StaticValue::of_float(std::numeric_limits<double>::quiet_NaN()));
  rt(StaticValue::of_string(""));
  rt(StaticValue::of_string("tab\there \"and\" \\slash\\"));
  rt(StaticValue::of(FunctionRef{"ns.fn/impl:v1-x"}));
  rt(StaticValue::of(Opaque{12345}));
  rt(StaticValue::list({}));
  rt(StaticValue::list({StaticValue::of_float(1.5), StaticValue::of_string("x"),
                        StaticValue::list({StaticValue::none()})}));
  rt(StaticValue::fields({{"n", StaticValue::of_int(2)},
                          {"inner", StaticValue::fields({{"f", StaticValue::of(FunctionRef{"g"})}})}}));

  CHECK(StaticValue::parse("3").is_int());
  CHECK(StaticValue::parse("3.0").is_float());
  CHECK(StaticValue::parse("-4e2").is_float());
  REQUIRE_THROWS_WITH(StaticValue::parse("3 x"), ContainsSubstring("[static]"));
  REQUIRE_THROWS_WITH(StaticValue::parse("{a=1,a=2}"), ContainsSubstring("duplicate field"));
  REQUIRE_THROWS_WITH(StaticValue::fields({{"a", StaticValue::none()}, {"a", StaticValue::none()}}),
                      ContainsSubstring("duplicate field"));
}

TEST_CASE("static value field lookup and equality") {
  StaticValue v = StaticValue::fields({{"a", StaticValue::of_int(1)}, {"b", StaticValue::of_float(2.0)}});
  REQUIRE(v.field("a") != nullptr);
  CHECK(v.field("a")->as_int() == 1);
  CHECK(v.field("zz") == nullptr);
  CHECK(StaticValue::of_float(0.0) != StaticValue::of_float(-0.0));
  double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK(StaticValue::of_float(nan) == StaticValue::of_float(nan));
  CHECK(StaticValue::of_int(1) != StaticValue::of_float(1.0));
}

TEST_CASE("canonical structure text") {
  // mixed container example used throughout the docs:
  // [4, {"key1": 3.0, "key2": True, "key3": <object>}]
  PyTree doc = PyTree::seq({PyTree::scalar_int(4),
                            PyTree::map({{"key1", PyTree::scalar_float(3.0)},
                                         {"key2", PyTree::scalar_bool(true)},
                                         {"key3", PyTree::opaque(Opaque::fresh())}})});
  CHECK(flatten(doc).structure.text() == "Seq[*,Map{key1:*,key2:*,key3:*}]");
  CHECK(flatten(doc).leaves.size() == 4);

  CHECK(flatten(PyTree::leaf(Leaf::scalar_int(0))).structure.text() == "*");
  CHECK(flatten(PyTree::tup({})).structure.text() == "Tup()");
  CHECK(flatten(PyTree::seq({})).structure.text() == "Seq[]");
  CHECK(flatten(PyTree::map({})).structure.text() == "Map{}");

  // leaf kinds are invisible to structure
  PyTree a = PyTree::seq({PyTree::scalar_int(1), PyTree::tensor(Tensor::ones(Shape{3}))});
  PyTree b = PyTree::seq({PyTree::sentinel(), PyTree::function(FunctionRef{"relu"})});
  CHECK(flatten(a).structure == flatten(b).structure);

  // registered nodes carry tag and payload
  oracles::register_test_kinds();
  PyTree reg = PyTree::registered(
      "t.pair", StaticValue::fields({{"w", StaticValue::of_int(3)}}),
      {PyTree::scalar_int(0), PyTree::scalar_int(1)});
  CHECK(flatten(reg).structure.text() == "Reg<t.pair;{w=3}>(*,*)");
  // payload differences change the structure
  PyTree reg2 = PyTree::registered(
      "t.pair", StaticValue::fields({{"w", StaticValue::of_int(4)}}),
      {PyTree::scalar_int(0), PyTree::scalar_int(1)});
  CHECK(flatten(reg).structure != flatten(reg2).structure);
  // child names are advisory and not part of the text
  PyTree named = PyTree::registered(
      "t.pair", StaticValue::fields({{"w", StaticValue::of_int(3)}}),
      {PyTree::scalar_int(0), PyTree::scalar_int(1)}, std::vector<std::string>{"left", "right"});
  CHECK(flatten(named).structure == flatten(reg).structure);
}

TEST_CASE("map keys sort by byte order and render quoted when needed") {
  PyTree m = PyTree::map({{"b", PyTree::scalar_int(1)},
                          {"Z", PyTree::scalar_int(2)},
                          {"a key", PyTree::scalar_int(3)}});
  // ' ' < 'Z' < 'b' in byte order; "a key" needs quoting ('a' begins it: "a key" > "Z")
  CHECK(flatten(m).structure.text() == "Map{Z:*,\"a key\":*,b:*}");
  CHECK(m.map_keys() == std::vector<std::string>{"Z", "a key", "b"});
  CHECK(m.map_at("a key").leaf_value().scalar_int_value() == 3);
  REQUIRE_THROWS_WITH(PyTree::map({{"x", PyTree::scalar_int(1)}, {"x", PyTree::scalar_int(2)}}),
                      ContainsSubstring("duplicate mapping key 'x'"));
}

TEST_CASE("fingerprint parsing round trips") {
  oracles::Rng rng(41);
  for (int i = 0; i < 300; ++i) {
    PyTree t = oracles::rand_tree(rng);
    StructureFingerprint fp = flatten(t).structure;
    StructureFingerprint back = StructureFingerprint::parse(fp.text());
    CHECK(back == fp);
    CHECK(back.text() == fp.text());
    CHECK(back.leaf_count() == fp.leaf_count());
  }
  REQUIRE_THROWS_WITH(StructureFingerprint::parse("Seq[*"), ContainsSubstring("[fingerprint]"));
  REQUIRE_THROWS_WITH(StructureFingerprint::parse("Map{b:*,a:*}"), ContainsSubstring("ascending"));
  REQUIRE_THROWS_WITH(StructureFingerprint::parse("Map{a:*,a:*}"), ContainsSubstring("[fingerprint]"));
  REQUIRE_THROWS_WITH(StructureFingerprint::parse("Blob(*)"), ContainsSubstring("[fingerprint]"));
}

TEST_CASE("flatten and unflatten round trip") {
  oracles::Rng rng(42);
  for (int i = 0; i < 300; ++i) {
    PyTree t = oracles::rand_tree(rng);
    Flattened f = flatten(t);
    PyTree back = unflatten(f.structure, f.leaves);
    CHECK(tree_equal(t, back));
  }
  PyTree t = PyTree::seq({PyTree::scalar_int(1)});
  REQUIRE_THROWS_WITH(unflatten(flatten(t).structure, std::vector<Leaf>{}),
                      ContainsSubstring("[unflatten] structure needs 1 leaves, got 0"));
}

TEST_CASE("tree_map and tree_map2") {
  PyTree t = PyTree::seq({PyTree::scalar_int(1), PyTree::map({{"x", PyTree::scalar_int(2)}})});
  PyTree doubled = tree_map(
      [](const Leaf& l) { return Leaf::scalar_int(l.scalar_int_value() * 2); }, t);
  CHECK(flatten(doubled).leaves[1].scalar_int_value() == 4);
  CHECK(flatten(doubled).structure == flatten(t).structure);

  PyTree summed = tree_map2(
      [](const Leaf& a, const Leaf& b) {
        return Leaf::scalar_int(a.scalar_int_value() + b.scalar_int_value());
      },
      t, doubled);
  CHECK(flatten(summed).leaves[0].scalar_int_value() == 3);
  REQUIRE_THROWS_WITH(tree_map2([](const Leaf& a, const Leaf&) { return a; }, t,
                                PyTree::seq({PyTree::scalar_int(1)})),
                      ContainsSubstring("[tree_map2] structure mismatch"));
}

TEST_CASE("leaf paths") {
  oracles::register_test_kinds();
  PyTree t = PyTree::seq(
      {PyTree::scalar_int(0),
       PyTree::map({{"w", PyTree::tup({PyTree::scalar_int(1), PyTree::scalar_int(2)})},
                    {"odd key", PyTree::scalar_int(3)}}),
       PyTree::registered("t.pair", StaticValue::fields({{"w", StaticValue::of_int(0)}}),
                          {PyTree::scalar_int(4), PyTree::scalar_int(5)},
                          std::vector<std::string>{"left", "right"})});
  const StructureFingerprint fp = flatten(t).structure;
  CHECK(leaf_path(fp, 0) == "$[0]");
  CHECK(leaf_path(fp, 1) == "$[1][\"odd key\"]");  // map keys sort: "odd key" < "w"
  CHECK(leaf_path(fp, 2) == "$[1].w[0]");
  CHECK(leaf_path(fp, 3) == "$[1].w[1]");
  CHECK(leaf_path(fp, 4) == "$[2].left");
  CHECK(leaf_path(fp, 5) == "$[2].right");
}

TEST_CASE("node registry") {
  REQUIRE_THROWS_WITH(PyTree::registered("nope.unknown", StaticValue::none(), {}),
                      ContainsSubstring("node kind 'nope.unknown' is not registered"));
  REQUIRE_THROWS_WITH(register_node_kind({"bad tag!", nullptr, nullptr}),
                      ContainsSubstring("invalid node tag"));
  oracles::register_test_kinds();
  REQUIRE_THROWS_WITH(register_node_kind({"t.pair", nullptr, nullptr}),
                      ContainsSubstring("already registered"));
  CHECK(node_kind_registered("t.pair"));
  CHECK(!node_kind_registered("t.missing"));

  // record() falls back to an opaque leaf for unregistered aggregates
  PyTree rec = PyTree::record("some.unregistered.thing", StaticValue::none(), {PyTree::scalar_int(1)});
  CHECK(rec.kind() == NodeKind::Leaf);
  CHECK(rec.leaf_value().is_opaque());
  PyTree known = PyTree::record("t.box", StaticValue::none(), {PyTree::scalar_int(1)});
  CHECK(known.kind() == NodeKind::Reg);
}

TEST_CASE("function registry") {
  FunctionRef ref = register_function("pytree_test.double", [](std::span<const PyTree> args) {
    return PyTree::scalar_int(tree_leaf(args[0]).scalar_int_value() * 2);
  });
  PyTree out = invoke(ref, {PyTree::scalar_int(21)});
  CHECK(tree_leaf(out).scalar_int_value() == 42);
  REQUIRE_THROWS_WITH(register_function("pytree_test.double", [](std::span<const PyTree>) {
                        return PyTree::scalar_int(0);
                      }),
                      ContainsSubstring("already registered"));
  REQUIRE_THROWS_WITH(register_function("bad name", [](std::span<const PyTree>) {
                        return PyTree::scalar_int(0);
                      }),
                      ContainsSubstring("invalid function name"));
  REQUIRE_THROWS_WITH(invoke(FunctionRef{"pytree_test.never"}, {}),
                      ContainsSubstring("function 'pytree_test.never' is not registered"));
}

TEST_CASE("tree_equal compares leaves by value or identity") {
  PyTree a = PyTree::seq({PyTree::tensor(Tensor::from_f64(Shape{2}, {1, 2}))});
  PyTree b = PyTree::seq({PyTree::tensor(Tensor::from_f64(Shape{2}, {1, 2}))});
  CHECK(tree_equal(a, b));
  CHECK(!tree_equal(a, PyTree::seq({PyTree::tensor(Tensor::from_f64(Shape{2}, {1, 3}))})));
  CHECK(!tree_equal(a, PyTree::tup({PyTree::tensor(Tensor::from_f64(Shape{2}, {1, 2}))})));
  CHECK(!tree_equal(PyTree::opaque(Opaque::fresh()), PyTree::opaque(Opaque::fresh())));
}

TEST_CASE("tree_leaf extracts exactly one leaf") {
  CHECK(tree_leaf(PyTree::scalar_int(5)).scalar_int_value() == 5);
  REQUIRE_THROWS_WITH(tree_leaf(PyTree::seq({PyTree::scalar_int(1), PyTree::scalar_int(2)})),
                      ContainsSubstring("expected a single-leaf tree, got Seq[*,*]"));
}
