#pragma once

// Neural Interpreter parameters and construction.
//
// A model is a stack of scripts. Each script owns a type-inference MLP, a
// routing temperature, a list of functions (signature + code) and a stack
// of LOC blocks shared by all of its functions and function iterations.
// Nothing is shared between scripts.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ni/tensor.hpp"

namespace ni::core {

enum class PositionalMode { learned_1d, relative_grid, none };

std::string to_string(PositionalMode mode);
PositionalMode positional_mode_from_string(const std::string& s);

struct ModelConfig {
  std::size_t d_in = 1;        // features per raw input element
  std::size_t d_out = 1;       // regression head outputs per CLS token
  std::size_t dim = 64;        // feature width of set elements
  std::size_t code_dim = 64;   // d_cond
  std::size_t type_dim = 24;   // d_type
  std::size_t key_dim = 32;    // features per attention head
  std::size_t heads = 1;
  std::size_t scripts = 2;     // n_s
  std::size_t iterations = 2;  // n_i
  std::size_t locs = 1;        // n_l
  std::size_t functions = 4;   // n_f per script
  double tau = 1.6;            // kernel truncation, in [0, 2)
  double routing_eps = 1e-8;
  std::size_t inputs = 5;      // raw input elements per sample
  std::size_t cls_tokens = 8;
  PositionalMode positional = PositionalMode::learned_1d;
  std::size_t grid_rows = 0;   // relative_grid only
  std::size_t grid_cols = 0;
  std::size_t rel_pos_dim = 16;
  // LayerNorm on the CLS outputs before the head. Every function iteration
  // roughly doubles the residual scale, so without it the head sees
  // features of norm ~2^(n_s n_i).
  bool head_layer_norm = true;
  bool signatures_trainable = false;
  bool codes_trainable = true;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::size_t set_size() const { return inputs + cls_tokens; }
};

enum class ParamGroup { cls_tokens, type_matching, function_codes, interpreter_and_embeddings, regression_head };

std::string to_string(ParamGroup group);

struct Parameter {
  std::string name;
  Array value;
  ParamGroup group = ParamGroup::interpreter_and_embeddings;
  bool trainable = true;
  bool unit_norm = false;      // re-projected onto the unit sphere after updates
  bool per_function = false;   // signature or code of one function
};

using ParamId = std::size_t;

class ParamStore {
 public:
  ParamId add(Parameter p);
  Parameter& operator[](ParamId id) { return params_.at(id); }
  const Parameter& operator[](ParamId id) const { return params_.at(id); }
  std::optional<ParamId> find(const std::string& name) const;
  /// Throws std::out_of_range with the name when absent.
  ParamId id(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::size_t value_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

struct ModLinIds {
  ParamId w_cond, ln_gain, ln_bias, weight, bias;
};

struct RelPosHeadIds {
  ParamId w_row, w_col;
  ModLinIds row, col;
};

struct RelPosIds {
  ParamId row_table, col_table;
  std::vector<RelPosHeadIds> heads;
};

struct LocIds {
  ParamId ln_attn_gain, ln_attn_bias;
  std::vector<ModLinIds> query, key, value;  // one per head
  ModLinIds mix;
  ParamId ln_mlp_gain, ln_mlp_bias;
  ModLinIds mlp_in, mlp_out;
  std::optional<RelPosIds> relpos;
};

struct FunctionIds {
  ParamId signature, code;
};

struct ScriptIds {
  ParamId type_w1, type_b1, type_w2, type_b2;
  ParamId sigma_log;
  std::vector<FunctionIds> functions;
  std::vector<LocIds> locs;
};

struct ModelIds {
  ParamId embed_w, embed_b;
  std::optional<ParamId> pos_table;
  ParamId cls_tokens;
  std::optional<ParamId> head_ln_gain, head_ln_bias;
  ParamId head_w, head_b;
  std::vector<ScriptIds> scripts;
};

/// One routable function: a unit signature on the type sphere and a code.
struct FunctionDef {
  Array signature;  // [type_dim], unit norm
  Array code;       // [code_dim]
  bool signature_trainable = false;
  bool code_trainable = true;
};

struct Model {
  ModelConfig config;
  ParamStore params;
  ModelIds ids;

  /// Fresh model with every parameter initialized from seed.
  static Model create(const ModelConfig& config, std::uint64_t seed);

  std::size_t function_count(std::size_t script) const { return ids.scripts.at(script).functions.size(); }
  FunctionDef function(std::size_t script, std::size_t u) const;

  /// Values in parameters that are not per-function and not CLS tokens:
  /// the interpreter, LOCs, type inference, embeddings and head.
  std::size_t shared_parameter_count() const;

  /// Re-create the CLS tokens for a new task count (fresh random init).
  void replace_cls_tokens(std::size_t count, std::uint64_t seed);

  /// Rebuild ids from parameter names (after loading a checkpoint).
  void rebuild_ids();
};

struct FunctionInit {
  std::uint64_t seed = 0;
  /// When set, every added function uses this definition instead of a
  /// random draw.
  std::optional<FunctionDef> def;
};

/// Append k functions to every script. Only new signature/code parameters
/// are created; returns their ids.
std::vector<ParamId> add_functions(Model& model, std::size_t k, const FunctionInit& init);

/// Eval-time keep mask, per script per function.
struct FunctionMask {
  std::vector<std::vector<bool>> keep;
};

/// Validates a keep mask (at least one kept function per script).
FunctionMask drop_functions(const Model& model, std::vector<std::vector<bool>> keep);

/// Draw a uniformly distributed unit vector.
Array random_unit_vector(std::size_t n, std::uint64_t seed);

}  // namespace ni::core
