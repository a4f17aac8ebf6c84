#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"

using namespace ni;
using namespace ni::core;
using ni::ad::Tape;
using ni::ad::Var;
using ni::testing::check_gradients;
using ni::testing::random_array;

namespace {

double max_abs_diff(const Array& a, const Array& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Array forward_set(const Model& model, const Array& inputs, const ForwardOptions& options = {}) {
  Tape tape;
  Bound p = bind(tape, model.params, false);
  SetBatch x = embed_inputs(model, p, tape.constant(inputs));
  return model_forward(model, p, x, options).elements.value();
}

ModLinIds make_mod_lin(ParamStore& store, const std::string& name, std::size_t dc, std::size_t in,
                       std::size_t out, std::mt19937_64& rng) {
  auto add = [&](const std::string& suffix, Array v) {
    return store.add(Parameter{name + suffix, std::move(v)});
  };
  return ModLinIds{add(".w_cond", random_array({dc, in}, rng)), add(".ln_gain", random_array({in}, rng)),
                   add(".ln_bias", random_array({in}, rng)), add(".weight", random_array({in, out}, rng)),
                   add(".bias", random_array({out}, rng))};
}

}  // namespace

TEST_CASE("compatibility matches the hand-evaluated kernel") {
  Tape t;
  Var types = t.constant(Array({1, 1, 2}, {1.0, 0.0}));
  Var sigs = t.constant(Array::matrix({{1.0, 0.0}, {0.0, 1.0}}));
  Var c = compatibility(types, sigs, t.constant(Array::scalar(0.0)), 1.6, 1e-8);
  CHECK(c.shape() == Shape{2, 1, 1});
  CHECK(c.value()[0] == doctest::Approx(0.731059).epsilon(1e-5));
  CHECK(c.value()[1] == doctest::Approx(0.268941).epsilon(1e-5));
}

TEST_CASE("compatibility truncates distant types and zeroes unmatched elements") {
  Tape t;
  // element 0 sits on signature 0; element 1 is antipodal to both signatures' span.
  Var types = t.constant(Array({1, 2, 2}, {1.0, 0.0, -1.0, 0.0}));
  Var sigs = t.constant(Array::matrix({{1.0, 0.0}, {0.0, 1.0}}));
  Var c = compatibility(types, sigs, t.constant(Array::scalar(0.0)), 0.5, 1e-8);
  const Array& v = c.value();  // [F=2, B=1, S=2]
  CHECK(v[0] == doctest::Approx(1.0 / (1.0 + 1e-8)));
  CHECK(v[2] == 0.0);  // d = 1 > tau
  CHECK(v[1] == 0.0);
  CHECK(v[3] == 0.0);
  for (double x : v.values()) CHECK((x >= 0.0 && x <= 1.0));
}

TEST_CASE("compatibility columns sum to at most one and respect the keep mask") {
  std::mt19937_64 rng(3);
  Tape t;
  Var types = l2_normalize(t.constant(random_array({3, 7, 5}, rng)));
  Var sigs = l2_normalize(t.constant(random_array({4, 5}, rng)));
  Var sl = t.constant(Array::scalar(-0.5));
  std::vector<bool> keep{true, false, true, true};
  Var c = compatibility(types, sigs, sl, 1.6, 1e-8, &keep);
  const Array& v = c.value();
  for (std::size_t i = 0; i < 21; ++i) {
    double s = 0.0;
    for (std::size_t u = 0; u < 4; ++u) s += v[u * 21 + i];
    CHECK(s <= 1.0);
    CHECK(v[21 + i] == 0.0);
  }
}

TEST_CASE("compatibility gradient flows through the kernel and sigma") {
  std::mt19937_64 rng(5);
  Array t0 = random_array({2, 3, 4}, rng);
  Array s0 = random_array({3, 4}, rng);
  auto fn = [](Tape&, const std::vector<Var>& v) {
    Var c = compatibility(l2_normalize(v[0]), l2_normalize(v[1]), v[2], 1.9, 1e-8);
    return ni::testing::project(c);
  };
  auto r = check_gradients(fn, {t0, s0, Array::scalar(0.3)});
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("mod_lin with a unit modulation reduces to an affine map") {
  std::mt19937_64 rng(7);
  ParamStore store;
  ModLinIds ids = make_mod_lin(store, "m", 3, 4, 5, rng);
  store[ids.ln_gain].value.fill(0.0);
  store[ids.ln_bias].value.fill(1.0);
  Tape t;
  Bound p = bind(t, store);
  Var codes = t.constant(random_array({2, 3}, rng));
  Var x = t.constant(random_array({2, 6, 4}, rng));
  Var y = mod_lin(p, ids, x, codes);
  Var ref = linear(x, p[ids.weight], p[ids.bias]);
  CHECK(y.value() == ref.value());
}

TEST_CASE("mod_lin with identity weights multiplies by the modulation") {
  std::mt19937_64 rng(8);
  ParamStore store;
  ModLinIds ids = make_mod_lin(store, "m", 3, 4, 4, rng);
  Array eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  store[ids.weight].value = eye;
  store[ids.bias].value.fill(0.0);
  Tape t;
  Bound p = bind(t, store);
  Var codes = t.constant(random_array({2, 3}, rng));
  Var x = t.constant(random_array({2, 5, 4}, rng));
  Var y = mod_lin(p, ids, x, codes);
  Var expect = mul(x, reshape(modulation(p, ids, codes), {2, 1, 4}));
  CHECK(max_abs_diff(y.value(), expect.value()) < 1e-15);
}

TEST_CASE("mod_lin gradient matches finite differences") {
  std::mt19937_64 rng(9);
  ParamStore store;
  ModLinIds ids = make_mod_lin(store, "m", 3, 4, 2, rng);
  Array x0 = random_array({2, 3, 4}, rng);
  Array c0 = random_array({2, 3}, rng);
  std::vector<Array> inputs{x0, c0};
  for (const Parameter& prm : store) inputs.push_back(prm.value);
  auto fn = [&](Tape& t, const std::vector<Var>& v) {
    Bound p{&t, {v.begin() + 2, v.end()}};
    return ni::testing::project(mod_lin(p, ids, v[0], v[1]));
  };
  auto r = check_gradients(fn, inputs);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("mod_mlp keeps shape, collapses to its outer bias, and differentiates") {
  std::mt19937_64 rng(10);
  ParamStore store;
  ModLinIds in = make_mod_lin(store, "in", 4, 8, 8, rng);
  ModLinIds out = make_mod_lin(store, "out", 4, 8, 8, rng);
  {
    Tape t;
    Bound p = bind(t, store);
    Var x = t.constant(random_array({2, 3, 8}, rng));
    Var codes = t.constant(random_array({2, 4}, rng));
    CHECK(mod_mlp(p, in, out, x, codes).shape() == x.shape());
  }
  {
    ParamStore zeroed = store;
    zeroed[in.weight].value.fill(0.0);
    zeroed[in.bias].value.fill(0.0);
    Tape t;
    Bound p = bind(t, zeroed);
    Var x = t.constant(random_array({2, 3, 8}, rng));
    Var codes = t.constant(random_array({2, 4}, rng));
    const Array y = mod_mlp(p, in, out, x, codes).value();
    const Array& b = zeroed[out.bias].value;
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == b[i % 8]);
  }
  std::vector<Array> inputs{random_array({2, 3, 8}, rng), random_array({2, 4}, rng)};
  for (const Parameter& prm : store) inputs.push_back(prm.value);
  auto fn = [&](Tape& t, const std::vector<Var>& v) {
    Bound p{&t, {v.begin() + 2, v.end()}};
    return ni::testing::project(mod_mlp(p, in, out, v[0], v[1]));
  };
  CHECK(check_gradients(fn, inputs).max_rel_error < 1e-5);
}

TEST_CASE("attention weights: annihilated columns, convex rows, one-element sets") {
  std::mt19937_64 rng(11);
  Tape t;
  Var q = t.constant(random_array({2, 3, 6, 4}, rng));
  Var k = t.constant(random_array({2, 3, 6, 4}, rng));
  Array c0 = random_array({2, 3, 6}, rng, 0.2, 1.0);
  c0[0 * 18 + 1 * 6 + 2] = 0.0;  // function 0, sample 1, element 2
  Var w = attention_weights(q, k, t.constant(c0), 1e-8);
  const Array& wv = w.value();
  for (std::size_t i = 0; i < 6; ++i) CHECK(wv[((0 * 3 + 1) * 6 + i) * 6 + 2] == 0.0);
  for (std::size_t row = 0; row < 36; ++row) {
    const std::size_t f = row / 18;
    const std::size_t b = (row / 6) % 3;
    const std::size_t i = row % 6;
    if (c0[(f * 3 + b) * 6 + i] == 0.0) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += wv[row * 6 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }

  Tape t1;
  Var q1 = t1.constant(random_array({1, 1, 1, 4}, rng));
  Var one = attention_weights(q1, q1, t1.constant(Array({1, 1, 1}, 1.0)), 1e-8);
  CHECK(one.value()[0] == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("attention gradient matches finite differences") {
  std::mt19937_64 rng(12);
  std::vector<Array> inputs{random_array({2, 1, 4, 3}, rng), random_array({2, 1, 4, 3}, rng),
                            random_array({2, 1, 4}, rng, 0.1, 0.9), random_array({2, 1, 4, 4}, rng)};
  auto fn = [](Tape&, const std::vector<Var>& v) {
    return ni::testing::project(attention_weights(v[0], v[1], v[2], 1e-8, v[3]));
  };
  CHECK(check_gradients(fn, inputs).max_rel_error < 1e-5);
}

TEST_CASE("LOC and interpreter leave unrouted elements bit-identical") {
  Model m = Model::create(ni::testing::small_config(), 21);
  std::mt19937_64 rng(13);
  Tape t;
  Bound p = bind(t, m.params, false);
  const std::size_t b = 2, s = 8, d = m.config.dim, f = m.config.functions;
  Array x0 = random_array({b, s, d}, rng);
  Array c0 = random_array({f, b, s}, rng, 0.0, 0.3);
  for (std::size_t u = 0; u < f; ++u) c0[(u * b + 1) * s + 4] = 0.0;  // sample 1, element 4
  Var x = t.constant(x0);
  Var c = t.constant(c0);
  Var codes_v = codes(m, p, 0);
  std::vector<Role> roles(s, Role::input);

  Var loc = loc_forward(m, p, m.ids.scripts[0].locs[0], x, codes_v, c, roles);
  CHECK(loc.shape() == Shape{f, b, s, d});
  Var y = interpreter_forward(m, p, 0, x, codes_v, c, roles);
  CHECK(y.shape() == x.shape());
  for (std::size_t u = 0; u < f; ++u) {
    for (std::size_t k = 0; k < d; ++k) {
      CHECK(loc.value()[((u * b + 1) * s + 4) * d + k] == x0[(1 * s + 4) * d + k]);
    }
  }
  for (std::size_t k = 0; k < d; ++k) CHECK(y.value()[(1 * s + 4) * d + k] == x0[(1 * s + 4) * d + k]);

  Var all_zero = interpreter_forward(m, p, 0, x, codes_v, t.constant(Array({f, b, s}, 0.0)), roles);
  CHECK(all_zero.value() == x0);
}

TEST_CASE("single function with constant compatibility scales its stream") {
  ModelConfig cfg = ni::testing::small_config();
  cfg.functions = 1;
  Model m = Model::create(cfg, 22);
  std::mt19937_64 rng(14);
  Tape t;
  Bound p = bind(t, m.params, false);
  Array x0 = random_array({2, 4, cfg.dim}, rng);
  Var x = t.constant(x0);
  Var c = t.constant(Array({1, 2, 4}, 0.4));
  Var codes_v = codes(m, p, 0);
  std::vector<Role> roles(4, Role::input);
  Var stream = x;
  for (const LocIds& loc : m.ids.scripts[0].locs) stream = loc_forward(m, p, loc, stream, codes_v, c, roles);
  Var y = interpreter_forward(m, p, 0, x, codes_v, c, roles);
  Array expect = x0;
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += 0.4 * stream.value()[i];
  CHECK(max_abs_diff(y.value(), expect) < 1e-14);
}

TEST_CASE("type inference yields unit, deterministic types") {
  Model m = Model::create(ni::testing::small_config(), 23);
  std::mt19937_64 rng(15);
  Tape t;
  Bound p = bind(t, m.params);
  Array x0 = random_array({2, 4, m.config.dim}, rng);
  for (std::size_t k = 0; k < m.config.dim; ++k) x0[m.config.dim + k] = x0[k];  // element 1 == element 0
  Var types = type_inference(m, p, 1, t.constant(x0));
  const Array& tv = types.value();
  const std::size_t dt = m.config.type_dim;
  for (std::size_t r = 0; r < 8; ++r) {
    double n2 = 0.0;
    for (std::size_t k = 0; k < dt; ++k) n2 += tv[r * dt + k] * tv[r * dt + k];
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-10);
  }
  for (std::size_t k = 0; k < dt; ++k) CHECK(tv[k] == tv[dt + k]);

  t.backward(ni::testing::project(types));
  const Array g = t.grad(p[m.ids.scripts[1].type_w1]);
  double norm = 0.0;
  for (double v : g.values()) norm += std::abs(v);
  CHECK(norm > 0.0);
}

TEST_CASE("embedding: set size, positional terms, CLS roles") {
  ModelConfig cfg = ni::testing::small_config();
  Model m = Model::create(cfg, 24);
  Array in({1, cfg.inputs}, 0.3);
  Tape t;
  Bound p = bind(t, m.params, false);
  SetBatch x = embed_inputs(m, p, t.constant(in));
  CHECK(x.elements.shape() == Shape{1, cfg.set_size(), cfg.dim});
  CHECK(x.roles.size() == cfg.set_size());
  CHECK(x.roles.back() == Role::cls);
  CHECK(x.roles.front() == Role::input);
  const Array& v = x.elements.value();
  CHECK(max_abs_diff(Array({cfg.dim}, {v.data(), v.data() + cfg.dim}),
                     Array({cfg.dim}, {v.data() + cfg.dim, v.data() + 2 * cfg.dim})) > 0.0);

  cfg.positional = PositionalMode::none;
  Model flat = Model::create(cfg, 24);
  Tape t2;
  Bound p2 = bind(t2, flat.params, false);
  const Array& w = embed_inputs(flat, p2, t2.constant(in)).elements.value();
  for (std::size_t k = 0; k < cfg.dim; ++k) CHECK(w[k] == w[cfg.dim + k]);
}

TEST_CASE("model forward preserves cardinality for a 25-element set") {
  ModelConfig cfg = ni::testing::small_config();
  cfg.inputs = 22;
  cfg.cls_tokens = 3;
  Model m = Model::create(cfg, 25);
  Array y = forward_set(m, ni::testing::uniform_inputs(2, 22, 1));
  CHECK(y.shape() == Shape{2, 25, cfg.dim});

  Tape t;
  Bound p = bind(t, m.params, false);
  SetBatch empty{t.constant(Array({1, 1, cfg.dim})), {}};
  CHECK_THROWS_AS(model_forward(m, p, empty), std::invalid_argument);
}

TEST_CASE("permuting inputs permutes outputs when positions are off") {
  ModelConfig cfg = ni::testing::small_config();
  cfg.positional = PositionalMode::none;
  Model m = Model::create(cfg, 26);
  Array in = ni::testing::uniform_inputs(3, cfg.inputs, 2);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Array permuted = in;
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < cfg.inputs; ++i) permuted[b * cfg.inputs + i] = in[b * cfg.inputs + perm[i]];
  }
  Array y = forward_set(m, in);
  Array yp = forward_set(m, permuted);
  const std::size_t s = cfg.set_size(), d = cfg.dim;
  double worst = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t src = i < cfg.inputs ? perm[i] : i;
      for (std::size_t k = 0; k < d; ++k) {
        worst = std::max(worst, std::abs(yp[(b * s + i) * d + k] - y[(b * s + src) * d + k]));
      }
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("iterations: shared weights, non-idempotent, anytime override") {
  Model m = Model::create(ni::testing::small_config(), 27);
  Array in = ni::testing::uniform_inputs(2, m.config.inputs, 3);
  const std::size_t params_before = m.params.value_count();
  ModelConfig deeper = m.config;
  deeper.iterations = 5;
  CHECK(Model::create(deeper, 27).params.value_count() == params_before);

  ForwardOptions one;
  one.iterations = 1;
  ForwardOptions two;
  two.iterations = 2;
  CHECK(max_abs_diff(forward_set(m, in, one), forward_set(m, in, two)) > 1e-6);
  CHECK(forward_set(m, in, two) == forward_set(m, in));
  for (std::size_t n = 1; n <= 16; ++n) {
    ForwardOptions o;
    o.iterations = n;
    CHECK(forward_set(m, in, o).all_finite());
  }
  ForwardOptions zero;
  zero.iterations = 0;
  CHECK_THROWS_AS(forward_set(m, in, zero), std::invalid_argument);

  // n_i = 1 is exactly one function iteration per script.
  Tape t;
  Bound p = bind(t, m.params, false);
  SetBatch x = embed_inputs(m, p, t.constant(in));
  SetBatch manual = fn_iter(m, p, 1, fn_iter(m, p, 0, x));
  CHECK(manual.elements.value() == forward_set(m, in, one));
}

TEST_CASE("each iteration recomputes compatibilities from the current set") {
  Model m = Model::create(ni::testing::small_config(), 28);
  Array in = ni::testing::uniform_inputs(1, m.config.inputs, 4);
  std::vector<Array> seen;
  ForwardOptions o;
  o.observer = [&](std::size_t s, std::size_t, const Array& c, const Array&) {
    if (s == 0) seen.push_back(c);
  };
  forward_set(m, in, o);
  REQUIRE(seen.size() == 2);
  CHECK(max_abs_diff(seen[0], seen[1]) > 0.0);

  std::vector<Array> shifted;
  o.observer = [&](std::size_t s, std::size_t, const Array& c, const Array&) {
    if (s == 0) shifted.push_back(c);
  };
  Array in2 = in;
  in2[0] += 0.05;
  forward_set(m, in2, o);
  CHECK(max_abs_diff(seen[1], shifted[1]) > 0.0);
}

TEST_CASE("adding an unreachable function changes no output bit") {
  ModelConfig cfg = ni::testing::small_config();
  cfg.tau = 0.5;
  Model m = Model::create(cfg, 29);
  Array in = ni::testing::uniform_inputs(4, cfg.inputs, 5);

  const Array before = forward_set(m, in);
  Array away = ni::testing::unreachable_signature(m, in);

  const std::size_t shared = m.shared_parameter_count();
  std::vector<Array> old_values;
  for (const Parameter& prm : m.params) old_values.push_back(prm.value);
  std::mt19937_64 code_rng(6);
  FunctionInit init;
  init.def = FunctionDef{away, random_array({cfg.code_dim}, code_rng)};
  std::vector<ParamId> added = add_functions(m, 1, init);
  CHECK(added.size() == 2 * cfg.scripts);
  CHECK(m.function_count(0) == cfg.functions + 1);
  CHECK(m.shared_parameter_count() == shared);
  for (std::size_t i = 0; i < old_values.size(); ++i) CHECK(m.params[i].value == old_values[i]);

  bool unmatched = true;
  ForwardOptions o;
  o.observer = [&](std::size_t, std::size_t, const Array& c, const Array&) {
    const std::size_t per = c.size() / (cfg.functions + 1);
    for (std::size_t i = cfg.functions * per; i < c.size(); ++i) unmatched = unmatched && c[i] == 0.0;
  };
  const Array after = forward_set(m, in, o);
  REQUIRE(unmatched);
  CHECK(after == before);
}

TEST_CASE("shared parameter count does not depend on the function count") {
  ModelConfig cfg = ni::testing::small_config();
  const std::size_t base = Model::create(cfg, 1).shared_parameter_count();
  for (std::size_t f : {1u, 2u, 7u}) {
    cfg.functions = f;
    CHECK(Model::create(cfg, 1).shared_parameter_count() == base);
  }
}

TEST_CASE("drop masks: full mask is exact, partial masks stay finite") {
  Model m = Model::create(ni::testing::small_config(), 30);
  Array in = ni::testing::uniform_inputs(3, m.config.inputs, 7);
  const Array base = forward_set(m, in);
  const std::size_t f = m.config.functions;
  FunctionMask full = drop_functions(m, {std::vector<bool>(f, true), std::vector<bool>(f, true)});
  ForwardOptions o;
  o.keep = &full;
  CHECK(forward_set(m, in, o) == base);
  for (std::size_t u = 0; u < f; ++u) {
    std::vector<bool> k(f, true);
    k[u] = false;
    FunctionMask mask = drop_functions(m, {k, k});
    o.keep = &mask;
    CHECK(forward_set(m, in, o).all_finite());
  }
  CHECK_THROWS_AS(drop_functions(m, {std::vector<bool>(f, false), std::vector<bool>(f, true)}),
                  std::invalid_argument);
}

TEST_CASE("relative position bias: zero tables, shift invariance, gradients, role check") {
  ModelConfig cfg = ni::testing::small_config();
  cfg.inputs = 9;
  cfg.positional = PositionalMode::relative_grid;
  cfg.grid_rows = 3;
  cfg.grid_cols = 3;
  cfg.rel_pos_dim = 4;
  Model m = Model::create(cfg, 31);
  const RelPosIds& rp = *m.ids.scripts[0].locs[0].relpos;
  std::vector<Role> roles(9, Role::input);
  roles.insert(roles.end(), 3, Role::cls);
  const std::size_t s = roles.size();

  {
    Model zero = m;
    zero.params[rp.row_table].value.fill(0.0);
    zero.params[rp.col_table].value.fill(0.0);
    Tape t;
    Bound p = bind(t, zero.params);
    Var b = relative_position_bias(zero, p, rp, 0, codes(zero, p, 0), roles);
    for (double v : b.value().values()) CHECK(v == 0.0);
  }
  {
    Tape t;
    Bound p = bind(t, m.params);
    Var b = relative_position_bias(m, p, rp, 1, codes(m, p, 0), roles);
    CHECK(b.shape() == Shape{cfg.functions, 1, s, s});
    const Array& v = b.value();
    auto at = [&](std::size_t u, std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
      return v[(u * s + r1 * 3 + c1) * s + r2 * 3 + c2];
    };
    for (std::size_t u = 0; u < cfg.functions; ++u) {
      CHECK(at(u, 0, 0, 1, 2) == at(u, 1, 0, 2, 2));
      CHECK(at(u, 0, 1, 0, 0) == at(u, 2, 2, 2, 1));
      CHECK(at(u, 0, 0, 2, 2) == at(u, 0, 0, 2, 2));
      CHECK(v[(u * s + 10) * s + 2] == 0.0);  // CLS rows carry no bias
    }
    CHECK(at(0, 0, 0, 1, 2) != at(0, 0, 0, 2, 1));
  }
  {
    std::vector<Array> inputs{m.params[rp.row_table].value, m.params[rp.col_table].value};
    auto fn = [&](Tape& t, const std::vector<Var>& v) {
      Bound p = bind(t, m.params);
      p.vars[rp.row_table] = v[0];
      p.vars[rp.col_table] = v[1];
      return ni::testing::project(relative_position_bias(m, p, rp, 0, codes(m, p, 0), roles));
    };
    CHECK(check_gradients(fn, inputs).max_rel_error < 1e-5);
  }
  {
    Tape t;
    Bound p = bind(t, m.params);
    std::vector<Role> bad(s, Role::input);
    bad[4] = Role::cls;
    CHECK_THROWS_AS(relative_position_bias(m, p, rp, 0, codes(m, p, 0), bad), std::invalid_argument);
  }
  ModelConfig too_big = cfg;
  too_big.grid_rows = 4;
  CHECK_THROWS_AS(Model::create(too_big, 1), std::invalid_argument);

  Array y = forward_set(m, ni::testing::uniform_inputs(2, 9, 8));
  CHECK(y.all_finite());
}

TEST_CASE("model predictions differentiate end to end on the tiny config") {
  ModelConfig cfg = ni::testing::tiny_config();
  cfg.signatures_trainable = true;
  Array in = ni::testing::uniform_inputs(3, cfg.inputs, 9);
  Model m = ni::testing::tiny_model_away_from_cutoff(cfg, in, 32);
  Array target = ni::testing::targets_near(predict_values(m, in), 10);

  auto fn = [&](Tape& t, const std::vector<Var>& leaves) {
    Bound p = ni::testing::bound_from(t, m.params, leaves);
    Var err = sub(predict(m, p, t.constant(in)), t.constant(target));
    return mean_all(mul(err, err));
  };
  auto r = check_gradients(fn, ni::testing::trainable_values(m.params));
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("replace_cls_tokens resizes the task slots") {
  Model m = Model::create(ni::testing::small_config(), 33);
  m.replace_cls_tokens(5, 1);
  CHECK(m.params[m.ids.cls_tokens].value.shape() == Shape{5, m.config.dim});
  Array y = predict_values(m, ni::testing::uniform_inputs(300, m.config.inputs, 1));
  CHECK(y.shape() == Shape{300, 5});
}

TEST_CASE("predict_values matches a single taped pass") {
  Model m = Model::create(ni::testing::small_config(), 34);
  Array in = ni::testing::uniform_inputs(20, m.config.inputs, 2);
  Tape t;
  Bound p = bind(t, m.params, false);
  CHECK(predict(m, p, t.constant(in)).value().storage() == predict_values(m, in).storage());
}

TEST_CASE("rebuild_ids recovers ids and checks shapes") {
  Model m = Model::create(ni::testing::small_config(), 35);
  Model copy;
  copy.config = m.config;
  copy.params = m.params;
  copy.rebuild_ids();
  CHECK(copy.ids.scripts[1].locs[1].mlp_out.bias == m.ids.scripts[1].locs[1].mlp_out.bias);
  copy.config.type_dim += 1;
  try {
    copy.rebuild_ids();
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("s0.type.w2") != std::string::npos);
  }
}
