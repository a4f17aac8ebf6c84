#pragma once

// Small model configurations and helpers shared by the core, training and
// acceptance tests.

#include <random>

#include "grad_check.hpp"
#include "ni/layers.hpp"
#include "ni/model.hpp"

namespace ni::testing {

/// d=8, n_f=2, n_s=1, n_i=2, n_l=1, two inputs plus two CLS tokens.
inline core::ModelConfig tiny_config() {
  core::ModelConfig c;
  c.dim = 8;
  c.code_dim = 8;
  c.type_dim = 8;
  c.key_dim = 8;
  c.heads = 1;
  c.scripts = 1;
  c.iterations = 2;
  c.locs = 1;
  c.functions = 2;
  c.inputs = 2;
  c.cls_tokens = 2;
  return c;
}

/// A small but complete config: two scripts, two heads, several elements.
inline core::ModelConfig small_config() {
  core::ModelConfig c;
  c.dim = 12;
  c.code_dim = 6;
  c.type_dim = 5;
  c.key_dim = 4;
  c.heads = 2;
  c.scripts = 2;
  c.iterations = 2;
  c.locs = 2;
  c.functions = 3;
  c.inputs = 5;
  c.cls_tokens = 3;
  return c;
}

/// Bound parameters from externally supplied leaves, in store order.
inline core::Bound bound_from(ad::Tape& tape, const core::ParamStore& store, const std::vector<ad::Var>& leaves) {
  core::Bound b;
  b.tape = &tape;
  std::size_t next = 0;
  for (const core::Parameter& p : store) {
    b.vars.push_back(p.trainable ? leaves.at(next++) : tape.constant(p.value));
  }
  return b;
}

inline std::vector<Array> trainable_values(const core::ParamStore& store) {
  std::vector<Array> out;
  for (const core::Parameter& p : store) {
    if (p.trainable) out.push_back(p.value);
  }
  return out;
}

inline Array uniform_inputs(std::size_t batch, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_array({batch, n}, rng, 0.0, 1.0);
}

/// Targets a small residual away from the given predictions. Keeps round-off
/// in the finite differences well below the 1e-8 floor used for components
/// whose exact gradient is zero (the key bias cancels inside the softmax).
inline Array targets_near(const Array& predictions, std::uint64_t seed, double spread = 0.05) {
  std::mt19937_64 rng(seed);
  Array t = predictions;
  std::uniform_real_distribution<double> u(-spread, spread);
  for (double& v : t.storage()) v += u(rng);
  return t;
}

/// A unit signature whose kernel distance to every type the model produces
/// on `inputs` exceeds tau, so a function carrying it is never routed to.
/// Found by pushing away from the closest type until all are out of reach.
inline Array unreachable_signature(const core::Model& m, const Array& inputs) {
  const std::size_t dt = m.config.type_dim;
  std::vector<double> types;
  core::ForwardOptions o;
  o.observer = [&](std::size_t, std::size_t, const Array&, const Array& t) {
    types.insert(types.end(), t.values().begin(), t.values().end());
  };
  core::predict_values(m, inputs, o);
  const std::size_t n = types.size() / dt;
  std::vector<double> s(dt, 0.0);
  for (std::size_t i = 0; i < types.size(); ++i) s[i % dt] -= types[i];
  auto normalize = [&] {
    double nn = 0.0;
    for (double v : s) nn += v * v;
    for (double& v : s) v /= std::sqrt(nn);
  };
  normalize();
  const double limit = 1.0 - m.config.tau - 1e-6;
  for (int step = 0; step < 100000; ++step) {
    std::size_t worst = 0;
    double best = -2.0;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dt; ++k) dot += s[k] * types[r * dt + k];
      if (dot > best) {
        best = dot;
        worst = r;
      }
    }
    if (best < limit) return Array({dt}, s);
    for (std::size_t k = 0; k < dt; ++k) s[k] -= 0.05 * types[worst * dt + k];
    normalize();
  }
  throw std::runtime_error("types cover too much of the sphere for an unreachable signature");
}

/// Smallest |d - tau| over every element, function and iteration.
inline double cutoff_margin(const core::Model& m, const Array& inputs) {
  double margin = 2.0;
  core::ForwardOptions o;
  o.observer = [&](std::size_t s, std::size_t, const Array&, const Array& types) {
    ad::Tape t;
    core::Bound p = core::bind(t, m.params, false);
    ad::Var d = ad::matmul(t.constant(types), ad::permute(core::signatures(m, p, s), {1, 0}));
    for (double v : d.value().values()) margin = std::min(margin, std::abs(1.0 - v - m.config.tau));
  };
  core::predict_values(m, inputs, o);
  return margin;
}

/// First seed from `seed` on whose model keeps every kernel distance at
/// least 1e-3 away from the truncation, so finite differences never cross it.
inline core::Model tiny_model_away_from_cutoff(const core::ModelConfig& cfg, const Array& inputs,
                                               std::uint64_t seed) {
  for (;; ++seed) {
    core::Model m = core::Model::create(cfg, seed);
    if (cutoff_margin(m, inputs) > 1e-3) return m;
  }
}

}  // namespace ni::testing
