#include "ni/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace ni::core {

std::string to_string(PositionalMode mode) {
  switch (mode) {
    case PositionalMode::learned_1d: return "learned-1d";
    case PositionalMode::relative_grid: return "relative-grid";
    case PositionalMode::none: return "none";
  }
  return "none";
}

PositionalMode positional_mode_from_string(const std::string& s) {
  if (s == "learned-1d") return PositionalMode::learned_1d;
  if (s == "relative-grid") return PositionalMode::relative_grid;
  if (s == "none") return PositionalMode::none;
  throw std::invalid_argument("unknown positional mode '" + s + "'");
}

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::cls_tokens: return "cls_tokens";
    case ParamGroup::type_matching: return "type_matching";
    case ParamGroup::function_codes: return "function_codes";
    case ParamGroup::interpreter_and_embeddings: return "interpreter_and_embeddings";
    case ParamGroup::regression_head: return "regression_head";
  }
  return "?";
}

void ModelConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("config field '") + name + "' must be >= 1");
  };
  positive(d_in, "d_in");
  positive(d_out, "d_out");
  positive(dim, "dim");
  positive(code_dim, "code_dim");
  positive(type_dim, "type_dim");
  positive(key_dim, "key_dim");
  positive(heads, "heads");
  positive(scripts, "scripts");
  positive(iterations, "iterations");
  positive(locs, "locs");
  positive(functions, "functions");
  positive(inputs, "inputs");
  positive(cls_tokens, "cls_tokens");
  if (!(tau >= 0.0 && tau < 2.0)) throw std::invalid_argument("config field 'tau' must lie in [0, 2)");
  if (!(routing_eps > 0.0)) throw std::invalid_argument("config field 'routing_eps' must be positive");
  if (positional == PositionalMode::relative_grid) {
    positive(grid_rows, "grid_rows");
    positive(grid_cols, "grid_cols");
    positive(rel_pos_dim, "rel_pos_dim");
    if (grid_rows * grid_cols > inputs) {
      throw std::invalid_argument("relative grid " + std::to_string(grid_rows) + "x" +
                                  std::to_string(grid_cols) + " covers more than the " +
                                  std::to_string(inputs) + " input elements");
    }
  }
}

ParamId ParamStore::add(Parameter p) {
  if (find(p.name)) throw std::invalid_argument("duplicate parameter '" + p.name + "'");
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::optional<ParamId> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

ParamId ParamStore::id(const std::string& name) const {
  if (auto i = find(name)) return *i;
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::size_t ParamStore::value_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Array random_unit_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Array v({n});
  double ss = 0.0;
  while (ss == 0.0) {
    ss = 0.0;
    for (double& x : v.storage()) {
      x = normal(rng);
      ss += x * x;
    }
  }
  const double norm = std::sqrt(ss);
  for (double& x : v.storage()) x /= norm;
  return v;
}

namespace {

enum class Init { zeros, ones, uniform_fan_in, normal, normal_small, unit_normal };

// Creates parameters on a fresh model, or looks them up (with a shape check)
// when rebuilding ids for loaded parameter values.
class Builder {
 public:
  Builder(Model& m, std::uint64_t seed, bool create) : m_(m), rng_(seed), create_(create) {}

  ParamId param(const std::string& name, Shape shape, ParamGroup group, Init init,
                bool trainable = true, bool unit_norm = false, bool per_function = false) {
    if (!create_) {
      const ParamId id = m_.params.id(name);
      if (m_.params[id].value.shape() != shape) {
        throw ShapeError("parameter '" + name + "' has shape " +
                         shape_string(m_.params[id].value.shape()) + ", config expects " +
                         shape_string(shape));
      }
      return id;
    }
    Array value(shape);
    fill(value, init, shape.empty() ? 1 : shape.front());
    return m_.params.add(Parameter{name, std::move(value), group, trainable, unit_norm, per_function});
  }

  ModLinIds mod_lin(const std::string& prefix, std::size_t in, std::size_t out) {
    const std::size_t dc = m_.config.code_dim;
    const auto g = ParamGroup::interpreter_and_embeddings;
    return ModLinIds{param(prefix + ".w_cond", {dc, in}, g, Init::uniform_fan_in),
                     param(prefix + ".ln_gain", {in}, g, Init::ones),
                     param(prefix + ".ln_bias", {in}, g, Init::zeros),
                     param(prefix + ".weight", {in, out}, g, Init::uniform_fan_in),
                     param(prefix + ".bias", {out}, g, Init::zeros)};
  }

  FunctionIds function(std::size_t s, std::size_t u, const FunctionDef* def) {
    const std::string p = "s" + std::to_string(s) + ".fn" + std::to_string(u);
    const auto& c = m_.config;
    const bool sig_train = def ? def->signature_trainable : c.signatures_trainable;
    const bool code_train = def ? def->code_trainable : c.codes_trainable;
    FunctionIds f{param(p + ".signature", {c.type_dim}, ParamGroup::type_matching, Init::unit_normal,
                        sig_train, true, true),
                  param(p + ".code", {c.code_dim}, ParamGroup::function_codes, Init::normal, code_train,
                        false, true)};
    if (create_ && def) {
      m_.params[f.signature].value = def->signature;
      m_.params[f.code].value = def->code;
    }
    return f;
  }

  void fill(Array& a, Init init, std::size_t fan_in) {
    switch (init) {
      case Init::zeros: a.fill(0.0); break;
      case Init::ones: a.fill(1.0); break;
      case Init::uniform_fan_in: {
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& v : a.storage()) v = u(rng_);
        break;
      }
      case Init::normal: {
        std::normal_distribution<double> n(0.0, 1.0);
        for (double& v : a.storage()) v = n(rng_);
        break;
      }
      case Init::normal_small: {
        std::normal_distribution<double> n(0.0, 0.02);
        for (double& v : a.storage()) v = n(rng_);
        break;
      }
      case Init::unit_normal: a = random_unit_vector(a.size(), rng_()); break;
    }
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  Model& m_;
  std::mt19937_64 rng_;
  bool create_;
};

void build(Model& m, std::uint64_t seed, bool create) {
  const ModelConfig& c = m.config;
  c.validate();
  Builder b(m, seed, create);
  const auto emb = ParamGroup::interpreter_and_embeddings;
  ModelIds ids;
  ids.embed_w = b.param("embed.w", {c.d_in, c.dim}, emb, Init::uniform_fan_in);
  ids.embed_b = b.param("embed.b", {c.dim}, emb, Init::zeros);
  if (c.positional == PositionalMode::learned_1d) {
    ids.pos_table = b.param("embed.pos", {c.inputs, c.dim}, emb, Init::normal);
  }
  ids.cls_tokens = b.param("cls", {c.cls_tokens, c.dim}, ParamGroup::cls_tokens, Init::normal);
  if (c.head_layer_norm) {
    ids.head_ln_gain = b.param("head.ln.gain", {c.dim}, ParamGroup::regression_head, Init::ones);
    ids.head_ln_bias = b.param("head.ln.bias", {c.dim}, ParamGroup::regression_head, Init::zeros);
  }
  ids.head_w = b.param("head.w", {c.dim, c.d_out}, ParamGroup::regression_head, Init::uniform_fan_in);
  ids.head_b = b.param("head.b", {c.d_out}, ParamGroup::regression_head, Init::zeros);

  for (std::size_t s = 0; s < c.scripts; ++s) {
    const std::string sp = "s" + std::to_string(s);
    ScriptIds sc;
    const auto tm = ParamGroup::type_matching;
    sc.type_w1 = b.param(sp + ".type.w1", {c.dim, c.dim}, tm, Init::uniform_fan_in);
    sc.type_b1 = b.param(sp + ".type.b1", {c.dim}, tm, Init::zeros);
    sc.type_w2 = b.param(sp + ".type.w2", {c.dim, c.type_dim}, tm, Init::uniform_fan_in);
    sc.type_b2 = b.param(sp + ".type.b2", {c.type_dim}, tm, Init::zeros);
    sc.sigma_log = b.param(sp + ".sigma_log", {1}, tm, Init::zeros);
    for (std::size_t u = 0; u < c.functions; ++u) sc.functions.push_back(b.function(s, u, nullptr));
    for (std::size_t l = 0; l < c.locs; ++l) {
      const std::string lp = sp + ".loc" + std::to_string(l);
      LocIds loc;
      loc.ln_attn_gain = b.param(lp + ".ln_attn.gain", {c.dim}, emb, Init::ones);
      loc.ln_attn_bias = b.param(lp + ".ln_attn.bias", {c.dim}, emb, Init::zeros);
      for (std::size_t h = 0; h < c.heads; ++h) {
        const std::string hs = std::to_string(h);
        loc.query.push_back(b.mod_lin(lp + ".attn.q" + hs, c.dim, c.key_dim));
        loc.key.push_back(b.mod_lin(lp + ".attn.k" + hs, c.dim, c.key_dim));
        loc.value.push_back(b.mod_lin(lp + ".attn.v" + hs, c.dim, c.key_dim));
      }
      loc.mix = b.mod_lin(lp + ".attn.mix", c.heads * c.key_dim, c.dim);
      loc.ln_mlp_gain = b.param(lp + ".ln_mlp.gain", {c.dim}, emb, Init::ones);
      loc.ln_mlp_bias = b.param(lp + ".ln_mlp.bias", {c.dim}, emb, Init::zeros);
      loc.mlp_in = b.mod_lin(lp + ".mlp.in", c.dim, c.dim);
      loc.mlp_out = b.mod_lin(lp + ".mlp.out", c.dim, c.dim);
      if (c.positional == PositionalMode::relative_grid) {
        RelPosIds rp;
        const std::string rpp = lp + ".relpos";
        rp.row_table = b.param(rpp + ".row_table", {2 * c.grid_rows - 1, c.rel_pos_dim}, emb, Init::normal_small);
        rp.col_table = b.param(rpp + ".col_table", {2 * c.grid_cols - 1, c.rel_pos_dim}, emb, Init::normal_small);
        for (std::size_t h = 0; h < c.heads; ++h) {
          const std::string hp = rpp + ".h" + std::to_string(h);
          RelPosHeadIds hi;
          hi.w_row = b.param(hp + ".w_row", {c.rel_pos_dim, 1}, emb, Init::uniform_fan_in);
          hi.w_col = b.param(hp + ".w_col", {c.rel_pos_dim, 1}, emb, Init::uniform_fan_in);
          hi.row = b.mod_lin(hp + ".row", c.rel_pos_dim, 1);
          hi.col = b.mod_lin(hp + ".col", c.rel_pos_dim, 1);
          rp.heads.push_back(hi);
        }
        loc.relpos = rp;
      }
      sc.locs.push_back(loc);
    }
    ids.scripts.push_back(std::move(sc));
  }
  m.ids = std::move(ids);
}

}  // namespace

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.config = config;
  build(m, seed, true);
  return m;
}

void Model::rebuild_ids() { build(*this, 0, false); }

FunctionDef Model::function(std::size_t script, std::size_t u) const {
  const FunctionIds& f = ids.scripts.at(script).functions.at(u);
  return FunctionDef{params[f.signature].value, params[f.code].value, params[f.signature].trainable,
                     params[f.code].trainable};
}

std::size_t Model::shared_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (!p.per_function && p.group != ParamGroup::cls_tokens) n += p.value.size();
  }
  return n;
}

void Model::replace_cls_tokens(std::size_t count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("need at least one CLS token");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Array v({count, config.dim});
  for (double& x : v.storage()) x = n(rng);
  params[ids.cls_tokens].value = std::move(v);
  config.cls_tokens = count;
}

std::vector<ParamId> add_functions(Model& model, std::size_t k, const FunctionInit& init) {
  if (k < 1) throw std::invalid_argument("add_functions needs k >= 1");
  if (init.def) {
    if (init.def->signature.shape() != Shape{model.config.type_dim} ||
        init.def->code.shape() != Shape{model.config.code_dim}) {
      throw ShapeError("function definition does not match the model's type/code dimensions");
    }
  }
  std::vector<ParamId> added;
  Builder b(model, init.seed, true);
  for (std::size_t s = 0; s < model.ids.scripts.size(); ++s) {
    ScriptIds& sc = model.ids.scripts[s];
    for (std::size_t j = 0; j < k; ++j) {
      FunctionIds f = b.function(s, sc.functions.size(), init.def ? &*init.def : nullptr);
      sc.functions.push_back(f);
      added.push_back(f.signature);
      added.push_back(f.code);
    }
  }
  model.config.functions += k;
  return added;
}

FunctionMask drop_functions(const Model& model, std::vector<std::vector<bool>> keep) {
  if (keep.size() != model.ids.scripts.size()) {
    throw std::invalid_argument("keep mask needs one entry per script");
  }
  for (std::size_t s = 0; s < keep.size(); ++s) {
    if (keep[s].size() != model.function_count(s)) {
      throw std::invalid_argument("keep mask for script " + std::to_string(s) + " has " +
                                  std::to_string(keep[s].size()) + " entries, expected " +
                                  std::to_string(model.function_count(s)));
    }
    bool any = false;
    for (bool k : keep[s]) any = any || k;
    if (!any) throw std::invalid_argument("keep mask drops every function of script " + std::to_string(s));
  }
  return FunctionMask{std::move(keep)};
}

}  // namespace ni::core
