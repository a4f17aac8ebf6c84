#include "ni/layers.hpp"

#include <algorithm>
#include <cmath>
#include <omp.h>
#include <stdexcept>

namespace ni::core {

using namespace ni::ad;

Bound bind(Tape& tape, const ParamStore& params, bool track_grads) {
  Bound b;
  b.tape = &tape;
  b.vars.reserve(params.size());
  for (const Parameter& p : params) {
    b.vars.push_back(track_grads && p.trainable ? tape.leaf(p.value, true) : tape.constant(p.value));
  }
  return b;
}

SetBatch embed_inputs(const Model& model, const Bound& p, Var scalars) {
  const ModelConfig& c = model.config;
  const Shape& s = scalars.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw ShapeError("inputs must be [B, N] or [B, N, d_in], got " + shape_string(s));
  }
  const std::size_t batch = s[0];
  const std::size_t n = s[1];
  const std::size_t d_in = s.size() == 3 ? s[2] : 1;
  if (d_in != c.d_in) {
    throw ShapeError("inputs carry " + std::to_string(d_in) + " features per element, model expects " +
                     std::to_string(c.d_in));
  }
  if (c.positional != PositionalMode::none && n != c.inputs) {
    throw ShapeError("model expects " + std::to_string(c.inputs) + " input elements, got " + std::to_string(n));
  }
  Var x = s.size() == 2 ? reshape(scalars, {batch, n, 1}) : scalars;
  Var emb = linear(x, p[model.ids.embed_w], p[model.ids.embed_b]);
  if (model.ids.pos_table) emb = add(emb, p[*model.ids.pos_table]);
  const std::size_t t = c.cls_tokens;
  Var cls = broadcast_to(reshape(p[model.ids.cls_tokens], {1, t, c.dim}), {batch, t, c.dim});
  const Var parts[] = {emb, cls};
  SetBatch out{concat(parts, 1), std::vector<Role>(n, Role::input)};
  out.roles.insert(out.roles.end(), t, Role::cls);
  return out;
}

Var type_inference(const Model& model, const Bound& p, std::size_t script, Var x) {
  const ScriptIds& s = model.ids.scripts.at(script);
  Var h = gelu(linear(x, p[s.type_w1], p[s.type_b1]));
  return l2_normalize(linear(h, p[s.type_w2], p[s.type_b2]));
}

namespace {

Var stack_rows(const Bound& p, const std::vector<FunctionIds>& fns, ParamId FunctionIds::*field) {
  std::vector<Var> rows;
  rows.reserve(fns.size());
  for (const FunctionIds& f : fns) {
    Var v = p[f.*field];
    rows.push_back(reshape(v, {1, v.value().size()}));
  }
  return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

}  // namespace

Var signatures(const Model& model, const Bound& p, std::size_t script) {
  return stack_rows(p, model.ids.scripts.at(script).functions, &FunctionIds::signature);
}

Var codes(const Model& model, const Bound& p, std::size_t script) {
  return stack_rows(p, model.ids.scripts.at(script).functions, &FunctionIds::code);
}

Var compatibility(Var types, Var sigs, Var sigma_log, double tau, double eps, const std::vector<bool>* keep) {
  const std::size_t f = sigs.value().dim(0);
  if (keep && keep->size() != f) throw std::invalid_argument("keep mask length differs from function count");
  // [B, S, F]
  Var dist = add_scalar(neg(matmul(types, permute(sigs, {1, 0}))), 1.0);
  Array mask(dist.shape());
  const Array& dv = dist.value();
  for (std::size_t i = 0; i < dv.size(); ++i) {
    const bool kept = !keep || (*keep)[i % f];
    mask[i] = kept && dv[i] <= tau ? 1.0 : 0.0;
  }
  Var kernel = mul(exp(mul(neg(dist), exp(neg(sigma_log)))), dist.tape->constant(std::move(mask)));
  Var c = div(kernel, add_scalar(sum(kernel, 2, true), eps));
  return permute(c, {2, 0, 1});
}

Var modulation(const Bound& p, const ModLinIds& ids, Var codes) {
  return layer_norm(matmul(codes, p[ids.w_cond]), p[ids.ln_gain], p[ids.ln_bias]);
}

Var mod_lin(const Bound& p, const ModLinIds& ids, Var x, Var codes) {
  return mod_linear(x, modulation(p, ids, codes), p[ids.weight], p[ids.bias]);
}

Var mod_mlp(const Bound& p, const ModLinIds& in, const ModLinIds& out, Var x, Var codes) {
  return mod_lin(p, out, gelu(mod_lin(p, in, x, codes)), codes);
}

Var attention_weights(Var q, Var k, Var compat, double eps, std::optional<Var> bias) {
  const Shape& cs = compat.shape();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Var logits = mul_scalar(batched_matmul(q, k, true), scale);
  if (bias) logits = add(logits, *bias);
  Var w = softmax(logits, 3);
  w = mul(w, reshape(compat, {cs[0], cs[1], cs[2], 1}));
  w = mul(w, reshape(compat, {cs[0], cs[1], 1, cs[2]}));
  return div(w, add_scalar(sum(w, 3, true), eps));
}

Var relative_position_bias(const Model& model, const Bound& p, const RelPosIds& ids, std::size_t head,
                           Var codes, const std::vector<Role>& roles) {
  const ModelConfig& c = model.config;
  const std::size_t rows = c.grid_rows;
  const std::size_t cols = c.grid_cols;
  const std::size_t grid = rows * cols;
  const std::size_t s = roles.size();
  if (grid > s) throw std::invalid_argument("relative grid is larger than the set");
  for (std::size_t e = 0; e < grid; ++e) {
    if (roles[e] != Role::input) {
      throw std::invalid_argument("relative grid covers non-input element " + std::to_string(e));
    }
  }
  const std::size_t f = codes.shape()[0];
  const RelPosHeadIds& h = ids.heads.at(head);

  // Scalar bias per offset and function: p^{uh}[delta] + e^h[delta].
  auto per_offset = [&](ParamId table_id, ParamId w_id, const ModLinIds& lin) {
    Var table = p[table_id];
    const std::size_t n = table.shape()[0];
    const std::size_t dim = table.shape()[1];
    Var e = reshape(matmul(table, p[w_id]), {1, n});
    Var tiled = broadcast_to(reshape(table, {1, n, dim}), {f, n, dim});
    Var pu = reshape(mod_lin(p, lin, tiled, codes), {f, n});
    return add(pu, e);
  };
  Var row = per_offset(ids.row_table, h.w_row, h.row);
  Var col = per_offset(ids.col_table, h.w_col, h.col);

  std::vector<long> row_index(s * s, -1);
  std::vector<long> col_index(s * s, -1);
  for (std::size_t i = 0; i < grid; ++i) {
    for (std::size_t j = 0; j < grid; ++j) {
      const long dr = static_cast<long>(j / cols) - static_cast<long>(i / cols);
      const long dc = static_cast<long>(j % cols) - static_cast<long>(i % cols);
      row_index[i * s + j] = dr + static_cast<long>(rows) - 1;
      col_index[i * s + j] = dc + static_cast<long>(cols) - 1;
    }
  }
  Var b = add(gather_columns(row, std::move(row_index)), gather_columns(col, std::move(col_index)));
  return reshape(b, {f, 1, s, s});
}

Var mod_attn(const Model& model, const Bound& p, const LocIds& ids, Var xn, Var codes, Var compat,
             const std::vector<Role>& roles) {
  std::vector<Var> heads;
  for (std::size_t h = 0; h < model.config.heads; ++h) {
    Var q = mod_lin(p, ids.query[h], xn, codes);
    Var k = mod_lin(p, ids.key[h], xn, codes);
    Var v = mod_lin(p, ids.value[h], xn, codes);
    std::optional<Var> bias;
    if (ids.relpos) bias = relative_position_bias(model, p, *ids.relpos, h, codes, roles);
    heads.push_back(batched_matmul(attention_weights(q, k, compat, model.config.routing_eps, bias), v));
  }
  Var mixed = heads.size() == 1 ? heads[0] : concat(heads, 3);
  return mod_lin(p, ids.mix, mixed, codes);
}

Var loc_forward(const Model& model, const Bound& p, const LocIds& ids, Var x, Var codes, Var compat,
                const std::vector<Role>& roles) {
  const Shape& cs = compat.shape();
  const Shape streams{cs[0], cs[1], cs[2], model.config.dim};
  Var cw = reshape(compat, {cs[0], cs[1], cs[2], 1});
  Var xn = layer_norm(x, p[ids.ln_attn_gain], p[ids.ln_attn_bias]);
  if (xn.shape() != streams) xn = broadcast_to(xn, streams);
  Var a = add(x, mul(cw, mod_attn(model, p, ids, xn, codes, compat, roles)));
  Var an = layer_norm(a, p[ids.ln_mlp_gain], p[ids.ln_mlp_bias]);
  return add(a, mul(cw, mod_mlp(p, ids.mlp_in, ids.mlp_out, an, codes)));
}

Var interpreter_forward(const Model& model, const Bound& p, std::size_t script, Var x, Var codes,
                        Var compat, const std::vector<Role>& roles) {
  const Shape& cs = compat.shape();
  Var stream = x;
  for (const LocIds& loc : model.ids.scripts.at(script).locs) {
    stream = loc_forward(model, p, loc, stream, codes, compat, roles);
  }
  Var cw = reshape(compat, {cs[0], cs[1], cs[2], 1});
  return add(x, sum(mul(cw, stream), 0));
}

SetBatch fn_iter(const Model& model, const Bound& p, std::size_t script, const SetBatch& x,
                 const ForwardOptions& options, std::size_t iteration) {
  const ScriptIds& s = model.ids.scripts.at(script);
  Var types = type_inference(model, p, script, x.elements);
  const std::vector<bool>* keep = options.keep ? &options.keep->keep.at(script) : nullptr;
  Var c = compatibility(types, signatures(model, p, script), p[s.sigma_log], model.config.tau,
                        model.config.routing_eps, keep);
  if (options.observer) options.observer(script, iteration, c.value(), types.value());
  Var y = interpreter_forward(model, p, script, x.elements, codes(model, p, script), c, x.roles);
  return SetBatch{y, x.roles};
}

SetBatch script_forward(const Model& model, const Bound& p, std::size_t script, const SetBatch& x,
                        const ForwardOptions& options) {
  const std::size_t n = options.iterations.value_or(model.config.iterations);
  if (n < 1) throw std::invalid_argument("function iterations must be >= 1");
  SetBatch y = x;
  for (std::size_t i = 0; i < n; ++i) y = fn_iter(model, p, script, y, options, i);
  return y;
}

SetBatch model_forward(const Model& model, const Bound& p, const SetBatch& x, const ForwardOptions& options) {
  if (x.roles.empty() || x.elements.shape().size() != 3 || x.elements.shape()[1] == 0) {
    throw std::invalid_argument("model_forward needs a non-empty input set");
  }
  if (options.iterations && *options.iterations < 1) {
    throw std::invalid_argument("function iterations must be >= 1");
  }
  SetBatch y = x;
  for (std::size_t s = 0; s < model.ids.scripts.size(); ++s) y = script_forward(model, p, s, y, options);
  return y;
}

Var predict(const Model& model, const Bound& p, Var scalars, const ForwardOptions& options) {
  SetBatch y = model_forward(model, p, embed_inputs(model, p, scalars), options);
  const std::size_t b = y.elements.shape()[0];
  const std::size_t s = y.elements.shape()[1];
  const std::size_t t = model.config.cls_tokens;
  Var cls = slice(y.elements, 1, s - t, s);
  if (model.ids.head_ln_gain) cls = layer_norm(cls, p[*model.ids.head_ln_gain], p[*model.ids.head_ln_bias]);
  Var out = linear(cls, p[model.ids.head_w], p[model.ids.head_b]);
  return reshape(out, {b, t * model.config.d_out});
}

Array predict_values(const Model& model, const Array& scalars, const ForwardOptions& options) {
  constexpr std::size_t kChunk = 256;
  const std::size_t n = scalars.dim(0);
  const std::size_t width = scalars.size() / n;
  const std::size_t outputs = model.config.cls_tokens * model.config.d_out;
  Array out({n, outputs});
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  auto run = [&](std::size_t ci) {
    const std::size_t lo = ci * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    Shape shape = scalars.shape();
    shape[0] = hi - lo;
    Array part(shape, std::vector<double>(scalars.data() + lo * width, scalars.data() + hi * width));
    Tape tape;
    Bound p = bind(tape, model.params, false);
    Var y = predict(model, p, tape.constant(std::move(part)), options);
    std::copy(y.value().data(), y.value().data() + y.value().size(), out.data() + lo * outputs);
  };
  if (options.observer) {
    // Observers see chunks in order.
    for (std::size_t ci = 0; ci < chunks; ++ci) run(ci);
  } else {
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t ci = 0; ci < chunks; ++ci) {
      try {
        run(ci);
      } catch (...) {
#pragma omp critical
        if (!error) error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
  }
  return out;
}

}  // namespace ni::core
