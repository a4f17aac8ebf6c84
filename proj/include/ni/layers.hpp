#pragma once

// Forward passes of the Neural Interpreter on a tape.
//
// Layout: per-function tensors are function-major, [F, B, S, D]; the
// compatibility matrix is [F, B, S]. Plain set tensors are [B, S, D].

#include <functional>
#include <optional>
#include <vector>

#include "ni/autodiff.hpp"
#include "ni/model.hpp"

namespace ni::core {

using ad::Var;

/// Parameters of a model placed on one tape. Trainable parameters become
/// gradient-tracking leaves when track_grads is set, everything else constants.
struct Bound {
  ad::Tape* tape = nullptr;
  std::vector<Var> vars;
  Var operator[](ParamId id) const { return vars.at(id); }
};

Bound bind(ad::Tape& tape, const ParamStore& params, bool track_grads = true);

enum class Role { input, cls };

struct SetBatch {
  Var elements;  // [B, S, D]
  std::vector<Role> roles;
};

/// Called once per function iteration with the quantities used for routing.
using RoutingObserver = std::function<void(std::size_t script, std::size_t iteration,
                                           const Array& compat,  // [F, B, S]
                                           const Array& types)>; // [B, S, d_type]

struct ForwardOptions {
  std::optional<std::size_t> iterations;  // overrides n_i in every script
  const FunctionMask* keep = nullptr;
  RoutingObserver observer;
};

/// scalars [B, N] (d_in == 1) or [B, N, d_in] -> set of N inputs then the CLS tokens.
SetBatch embed_inputs(const Model& model, const Bound& p, Var scalars);

/// [B, S, D] -> unit types [B, S, d_type].
Var type_inference(const Model& model, const Bound& p, std::size_t script, Var x);

/// Stacked unit signatures [F, d_type] and codes [F, d_cond] of a script.
Var signatures(const Model& model, const Bound& p, std::size_t script);
Var codes(const Model& model, const Bound& p, std::size_t script);

/// Truncated-kernel routing weights C [F, B, S] from types [B, S, T] and
/// signatures [F, T]. keep (optional, length F) zeroes the kernel of dropped
/// functions before normalization.
Var compatibility(Var types, Var signatures, Var sigma_log, double tau, double eps,
                  const std::vector<bool>* keep = nullptr);

/// LayerNorm(codes W_c): one modulation vector per function, [F, in].
Var modulation(const Bound& p, const ModLinIds& ids, Var codes);
/// x [F, ..., in] -> [F, ..., out], modulated by each function's code.
Var mod_lin(const Bound& p, const ModLinIds& ids, Var x, Var codes);
Var mod_mlp(const Bound& p, const ModLinIds& in, const ModLinIds& out, Var x, Var codes);

/// Renormalized kernel-modulated attention weights [F, B, S, S] from
/// q, k [F, B, S, d_key] and C [F, B, S]. bias (optional) is added to the
/// scaled logits and broadcasts against [F, B, S, S].
Var attention_weights(Var q, Var k, Var compat, double eps, std::optional<Var> bias = std::nullopt);

/// Per-function, per-head positional bias [F, 1, S, S] for a relative grid
/// laid over the first grid_rows * grid_cols elements. Errors when the grid
/// covers CLS roles.
Var relative_position_bias(const Model& model, const Bound& p, const RelPosIds& ids, std::size_t head,
                           Var codes, const std::vector<Role>& roles);

/// xn [F, B, S, D] (already normalized) -> [F, B, S, D].
Var mod_attn(const Model& model, const Bound& p, const LocIds& ids, Var xn, Var codes, Var compat,
             const std::vector<Role>& roles);

/// x [B, S, D] or [F, B, S, D] -> [F, B, S, D].
Var loc_forward(const Model& model, const Bound& p, const LocIds& ids, Var x, Var codes, Var compat,
                const std::vector<Role>& roles);

/// y = x + sum_u C_u * (LOC stack)(x; c_u).
Var interpreter_forward(const Model& model, const Bound& p, std::size_t script, Var x, Var codes,
                        Var compat, const std::vector<Role>& roles);

SetBatch fn_iter(const Model& model, const Bound& p, std::size_t script, const SetBatch& x,
                 const ForwardOptions& options = {}, std::size_t iteration = 0);
SetBatch script_forward(const Model& model, const Bound& p, std::size_t script, const SetBatch& x,
                        const ForwardOptions& options = {});
SetBatch model_forward(const Model& model, const Bound& p, const SetBatch& x,
                       const ForwardOptions& options = {});

/// Shared regression head on the CLS outputs: scalars [B, N] -> [B, T].
Var predict(const Model& model, const Bound& p, Var scalars, const ForwardOptions& options = {});

/// Untaped convenience: predictions for a batch of inputs.
Array predict_values(const Model& model, const Array& scalars, const ForwardOptions& options = {});

}  // namespace ni::core
