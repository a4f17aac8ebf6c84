#include "ni/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numbers>
#include <numeric>
#include <omp.h>
#include <sstream>
#include <stdexcept>

namespace ni::train {

using ad::Tape;
using ad::Var;

Var multitask_mse(Var pred, Var target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("multitask_mse: prediction " + shape_string(pred.shape()) + " vs target " +
                     shape_string(target.shape()));
  }
  Var err = ad::sub(pred, target);
  return ad::mean_all(ad::mul(err, err));
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::cls_only: return "cls_only";
    case Regime::cls_plus_type: return "cls_plus_type";
    case Regime::all: return "all";
  }
  return "all";
}

Regime regime_from_string(const std::string& s) {
  if (s == "cls_only") return Regime::cls_only;
  if (s == "cls_plus_type") return Regime::cls_plus_type;
  if (s == "all") return Regime::all;
  throw std::invalid_argument("unknown regime '" + s + "' (expected cls_only, cls_plus_type or all)");
}

const GroupSpec& ParamGroups::get(ParamGroup g) const {
  for (const GroupSpec& s : groups) {
    if (s.group == g) return s;
  }
  throw std::out_of_range("no group " + core::to_string(g));
}

GroupSpec& ParamGroups::get(ParamGroup g) {
  return const_cast<GroupSpec&>(static_cast<const ParamGroups&>(*this).get(g));
}

bool ParamGroups::is_trainable(ParamId id) const {
  for (ParamId e : extra) {
    if (e == id) return true;
  }
  for (const GroupSpec& s : groups) {
    for (ParamId p : s.params) {
      if (p == id) return s.trainable;
    }
  }
  return false;
}

std::vector<ParamId> ParamGroups::trainable_ids() const {
  std::vector<ParamId> out;
  for (const GroupSpec& s : groups) {
    for (ParamId p : s.params) {
      if (is_trainable(p)) out.push_back(p);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t ParamGroups::trainable_values(const Model& model) const {
  std::size_t n = 0;
  for (ParamId id : trainable_ids()) n += model.params[id].value.size();
  return n;
}

ParamGroups build_param_groups(const Model& model, Regime regime) {
  ParamGroups g;
  for (ParamGroup pg : {ParamGroup::cls_tokens, ParamGroup::type_matching, ParamGroup::function_codes,
                        ParamGroup::interpreter_and_embeddings, ParamGroup::regression_head}) {
    GroupSpec s{pg, false, 1.0, {}};
    switch (pg) {
      case ParamGroup::cls_tokens: s.trainable = true; break;
      case ParamGroup::type_matching: s.trainable = regime != Regime::cls_only; break;
      default: s.trainable = regime == Regime::all; break;
    }
    g.groups.push_back(s);
  }
  for (ParamId id = 0; id < model.params.size(); ++id) g.get(model.params[id].group).params.push_back(id);
  return g;
}

void apply_param_groups(Model& model, const ParamGroups& groups) {
  std::size_t covered = 0;
  for (const GroupSpec& s : groups.groups) covered += s.params.size();
  if (covered != model.params.size()) {
    throw std::invalid_argument("parameter groups cover " + std::to_string(covered) + " of " +
                                std::to_string(model.params.size()) + " parameters");
  }
  for (ParamId id = 0; id < model.params.size(); ++id) model.params[id].trainable = groups.is_trainable(id);
}

void adam_step(core::ParamStore& params, const std::vector<Array>& grads, AdamState& state,
               const AdamConfig& config, double lr) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: one gradient slot per parameter");
  const std::size_t t = state.step + 1;
  for (ParamId id = 0; id < params.size(); ++id) {
    const Array& g = grads[id];
    if (!params[id].trainable || g.size() == 0) continue;
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient for '" + params[id].name + "' at step " + std::to_string(t));
    }
  }
  state.m.resize(params.size());
  state.v.resize(params.size());
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));

  // Rectification of the adaptive term (RAdam).
  bool adaptive = true;
  double rect = 1.0;
  if (config.rectified) {
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double bt = std::pow(b2, static_cast<double>(t));
    const double rho = rho_inf - 2.0 * static_cast<double>(t) * bt / (1.0 - bt);
    adaptive = rho > 5.0;
    if (adaptive) {
      rect = std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
    }
  }

  for (ParamId id = 0; id < params.size(); ++id) {
    core::Parameter& p = params[id];
    const Array& g = grads[id];
    if (!p.trainable || g.size() == 0) continue;
    if (g.shape() != p.value.shape()) {
      throw ShapeError("gradient for '" + p.name + "' has shape " + shape_string(g.shape()));
    }
    Array& m = state.m[id];
    Array& v = state.v[id];
    if (m.size() == 0) {
      m = Array(p.value.shape());
      v = Array(p.value.shape());
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = m[i] / c1;
      if (adaptive) {
        const double vh = v[i] / c2;
        p.value[i] -= lr * rect * mh / (std::sqrt(vh) + config.eps);
      } else {
        p.value[i] -= lr * mh;
      }
    }
    if (p.unit_norm) {
      double n = 0.0;
      for (double x : p.value.values()) n += x * x;
      n = std::sqrt(n);
      if (n == 0.0) throw NumericError("parameter '" + p.name + "' collapsed to zero");
      for (double& x : p.value.storage()) x /= n;
    }
  }
  state.step = t;
}

double cosine_schedule(std::size_t step, double eta_max, double eta_min, std::size_t decay_steps) {
  if (decay_steps == 0) throw std::invalid_argument("cosine_schedule needs decay_steps > 0");
  const double frac = static_cast<double>(std::min(step, decay_steps)) / static_cast<double>(decay_steps);
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

double EpochMetrics::mean_r2() const {
  return r2.empty() ? 0.0 : std::accumulate(r2.begin(), r2.end(), 0.0) / static_cast<double>(r2.size());
}

double Evaluation::mean_r2() const {
  return r2.empty() ? 0.0 : std::accumulate(r2.begin(), r2.end(), 0.0) / static_cast<double>(r2.size());
}

namespace {

double mse(const Array& pred, const Array& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

struct BatchResult {
  std::vector<Array> grads;  // per parameter id, empty when frozen
  Array predictions;
};

// Gradient of the batch-mean loss, accumulated over fixed-size micro-batches
// in index order so the result does not depend on the thread count.
BatchResult batch_gradients(const Model& model, const Array& x, const Array& y, std::size_t micro) {
  const std::size_t b = x.dim(0);
  const std::size_t tasks = y.dim(1);
  const std::size_t chunks = (b + micro - 1) / micro;
  const double scale = 1.0 / static_cast<double>(b * tasks);
  std::vector<std::vector<Array>> parts(chunks);
  BatchResult out;
  out.predictions = Array(y.shape());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t c = 0; c < chunks; ++c) {
    try {
      const std::size_t lo = c * micro;
      const std::size_t hi = std::min(b, lo + micro);
      const std::size_t xw = x.size() / b;
      Shape xs = x.shape();
      xs[0] = hi - lo;
      Tape tape;
      core::Bound p = core::bind(tape, model.params, true);
      Var xin = tape.constant(Array(xs, std::vector<double>(x.data() + lo * xw, x.data() + hi * xw)));
      Var yin = tape.constant(
          Array({hi - lo, tasks}, std::vector<double>(y.data() + lo * tasks, y.data() + hi * tasks)));
      Var pred = core::predict(model, p, xin);
      Var err = ad::sub(pred, yin);
      Var loss = ad::mul_scalar(ad::sum_all(ad::mul(err, err)), scale);
      tape.backward(loss);
      std::copy(pred.value().data(), pred.value().data() + pred.value().size(), out.predictions.data() + lo * tasks);
      parts[c].resize(model.params.size());
      for (ParamId id = 0; id < model.params.size(); ++id) {
        if (model.params[id].trainable) parts[c][id] = tape.grad(p[id]);
      }
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  out.grads = std::move(parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    for (ParamId id = 0; id < model.params.size(); ++id) {
      Array& g = out.grads[id];
      const Array& h = parts[c][id];
      for (std::size_t i = 0; i < h.size(); ++i) g[i] += h[i];
    }
  }
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  fuzzy::Rng rng(seed * 0x9E3779B97F4A7C15ull + epoch + 1);
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(fuzzy::uniform01(rng) * static_cast<double>(i + 1));
    std::swap(perm[i], perm[std::min(j, i)]);
  }
  return perm;
}

}  // namespace

Evaluation evaluate(const Model& model, const Array& inputs, const Array& targets,
                    const core::ForwardOptions& options) {
  Array pred = core::predict_values(model, inputs, options);
  if (pred.shape() != targets.shape()) {
    throw ShapeError("model predicts " + shape_string(pred.shape()) + " but targets are " +
                     shape_string(targets.shape()));
  }
  return Evaluation{mse(pred, targets), fuzzy::r2_per_task(pred, targets)};
}

void fit(Model& model, const fuzzy::RegressionDataset& data, const TrainConfig& config, TrainState& state,
         const EpochCallback& on_epoch) {
  const std::size_t tasks = data.num_tasks();
  if (model.config.cls_tokens * model.config.d_out != tasks) {
    throw std::invalid_argument("model has " + std::to_string(model.config.cls_tokens) +
                                " CLS tokens but the dataset has " + std::to_string(tasks) + " tasks");
  }
  if (config.batch_size < 1 || config.micro_batch < 1) throw std::invalid_argument("batch sizes must be >= 1");
  const Array train_x = fuzzy::take_rows(data.inputs, data.train);
  const Array train_y = fuzzy::take_rows(data.targets, data.train);
  const Array val_x = fuzzy::take_rows(data.inputs, data.validation);
  const Array val_y = fuzzy::take_rows(data.targets, data.validation);
  const std::size_t n = data.train.size();

  while (state.epoch < config.epochs) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = epoch_order(n, state.seed, state.epoch);
    Array seen_pred({n, tasks});
    Array seen_y({n, tasks});
    double lr = config.adam.lr;
    for (std::size_t lo = 0; lo < n; lo += config.batch_size) {
      const std::size_t hi = std::min(n, lo + config.batch_size);
      std::span<const std::size_t> rows(order.data() + lo, hi - lo);
      const Array bx = fuzzy::take_rows(train_x, rows);
      const Array by = fuzzy::take_rows(train_y, rows);
      lr = config.cosine ? cosine_schedule(state.adam.step, config.adam.lr, config.cosine->eta_min,
                                           config.cosine->decay_steps)
                         : config.adam.lr;
      BatchResult r;
      try {
        r = batch_gradients(model, bx, by, config.micro_batch);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(state.epoch + 1) + ", step " +
                           std::to_string(state.adam.step + 1) + ")");
      }
      adam_step(model.params, r.grads, state.adam, config.adam, lr);
      std::copy(r.predictions.data(), r.predictions.data() + r.predictions.size(), seen_pred.data() + lo * tasks);
      std::copy(by.data(), by.data() + by.size(), seen_y.data() + lo * tasks);
    }
    const double train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    Evaluation val = evaluate(model, val_x, val_y);
    const double total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.epoch += 1;
    state.history.push_back(
        {state.epoch, "train", mse(seen_pred, seen_y), fuzzy::r2_per_task(seen_pred, seen_y), lr, train_seconds});
    state.history.push_back({state.epoch, "validation", val.loss, val.r2, lr, total_seconds});
    if (state.best_params.empty() || val.loss < state.best_loss) {
      state.best_loss = val.loss;
      state.best_epoch = state.epoch;
      state.best_params.clear();
      for (const core::Parameter& p : model.params) state.best_params.push_back(p.value);
    }
    if (on_epoch) on_epoch(state);
  }
  state.last_params.clear();
  for (const core::Parameter& p : model.params) state.last_params.push_back(p.value);
  if (!state.best_params.empty()) {
    for (ParamId id = 0; id < model.params.size(); ++id) model.params[id].value = state.best_params[id];
  }
}

void restore_last(Model& model, const TrainState& state) {
  if (state.last_params.size() != model.params.size()) {
    throw std::invalid_argument("train state holds " + std::to_string(state.last_params.size()) +
                                " parameters, model has " + std::to_string(model.params.size()));
  }
  for (ParamId id = 0; id < model.params.size(); ++id) {
    if (state.last_params[id].shape() != model.params[id].value.shape()) {
      throw ShapeError("train state shape mismatch for '" + model.params[id].name + "'");
    }
    model.params[id].value = state.last_params[id];
  }
}

TrainState pretrain(Model& model, const fuzzy::RegressionDataset& data, const TrainConfig& config,
                    const EpochCallback& on_epoch) {
  TrainState state;
  state.seed = config.seed;
  fit(model, data, config, state, on_epoch);
  return state;
}

TrainState finetune(Model& model, const fuzzy::RegressionDataset& data, const ParamGroups& groups,
                    const TrainConfig& config, std::uint64_t cls_seed, const EpochCallback& on_epoch) {
  model.replace_cls_tokens(data.num_tasks() / model.config.d_out, cls_seed);
  apply_param_groups(model, groups);
  TrainState state;
  state.seed = config.seed;
  fit(model, data, config, state, on_epoch);
  return state;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  const std::size_t tasks = history.empty() ? 0 : history.front().r2.size();
  os << "epoch,split,loss";
  for (std::size_t j = 0; j < tasks; ++j) os << ",r2_" << j;
  os << ",lr,seconds\n";
  os.precision(17);
  for (const EpochMetrics& m : history) {
    os << m.epoch << ',' << m.split << ',' << m.loss;
    for (double r : m.r2) os << ',' << r;
    os << ',' << m.lr << ',' << m.seconds << '\n';
  }
  return os.str();
}

}  // namespace ni::train
