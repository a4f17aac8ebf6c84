#pragma once

// Multi-task regression loss, Adam, schedules, freezing regimes and the
// training loop shared by pretraining and finetuning.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ni/fuzzy.hpp"
#include "ni/layers.hpp"
#include "ni/model.hpp"

namespace ni::train {

using core::Model;
using core::ParamGroup;
using core::ParamId;

/// Mean over batch and tasks of the squared error; pred and target [B, T].
ad::Var multitask_mse(ad::Var pred, ad::Var target);

// ---- parameter groups ----

enum class Regime { cls_only, cls_plus_type, all };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct GroupSpec {
  ParamGroup group;
  bool trainable = false;
  double lr_scale = 1.0;
  std::vector<ParamId> params;
};

struct ParamGroups {
  std::vector<GroupSpec> groups;  // one per ParamGroup, a partition of the model
  std::vector<ParamId> extra;     // trainable on top of the groups (e.g. added functions)

  const GroupSpec& get(ParamGroup g) const;
  GroupSpec& get(ParamGroup g);
  bool is_trainable(ParamId id) const;
  std::vector<ParamId> trainable_ids() const;
  std::size_t trainable_values(const Model& model) const;
};

ParamGroups build_param_groups(const Model& model, Regime regime);

/// Set every parameter's trainable flag from the groups.
void apply_param_groups(Model& model, const ParamGroups& groups);

// ---- optimizer ----

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool rectified = false;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<Array> m;  // per parameter id; empty for never-updated ones
  std::vector<Array> v;
};

/// One update of every trainable parameter with a gradient. Unit-norm
/// parameters are projected back onto the sphere afterwards. A non-finite
/// gradient throws NumericError naming the parameter and step.
void adam_step(core::ParamStore& params, const std::vector<Array>& grads, AdamState& state,
               const AdamConfig& config, double lr);

/// eta_min + (eta_max - eta_min)(1 + cos(pi min(step, decay) / decay)) / 2.
double cosine_schedule(std::size_t step, double eta_max, double eta_min, std::size_t decay_steps);

// ---- training loop ----

struct Schedule {
  double eta_min = 0.0;
  std::size_t decay_steps = 1;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  std::size_t micro_batch = 32;  // gradient accumulation unit; fixes the reduction order
  AdamConfig adam{0.006};
  std::optional<Schedule> cosine;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;  // train or validation
  double loss = 0.0;
  std::vector<double> r2;
  double lr = 0.0;
  double seconds = 0.0;

  double mean_r2() const;
  bool operator==(const EpochMetrics&) const = default;
};

struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  AdamState adam;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> history;
  double best_loss = 0.0;  // validation loss of best_params
  std::size_t best_epoch = 0;
  std::vector<Array> best_params;
  std::vector<Array> last_params;  // end of the last epoch, for resuming
};

/// Puts the parameters of the last completed epoch back into the model so
/// fit can continue exactly where it stopped.
void restore_last(Model& model, const TrainState& state);

/// Called after every epoch with the rows just appended.
using EpochCallback = std::function<void(const TrainState&)>;

/// Trains the currently trainable parameters of model on data.train,
/// validating after each epoch. Runs until state.epoch == config.epochs and
/// leaves the parameters of the best validation epoch in the model.
/// The number of CLS tokens must equal the number of tasks.
void fit(Model& model, const fuzzy::RegressionDataset& data, const TrainConfig& config, TrainState& state,
         const EpochCallback& on_epoch = {});

struct Evaluation {
  double loss = 0.0;
  std::vector<double> r2;
  double mean_r2() const;
};

Evaluation evaluate(const Model& model, const Array& inputs, const Array& targets,
                    const core::ForwardOptions& options = {});

/// Pretraining: every parameter whose flag is set is trained.
TrainState pretrain(Model& model, const fuzzy::RegressionDataset& data, const TrainConfig& config,
                    const EpochCallback& on_epoch = {});

/// Finetuning on new tasks: fresh CLS tokens (one per task) then training
/// the regime's groups plus any extra ids.
TrainState finetune(Model& model, const fuzzy::RegressionDataset& data, const ParamGroups& groups,
                    const TrainConfig& config, std::uint64_t cls_seed, const EpochCallback& on_epoch = {});

/// CSV header and rows: epoch,split,loss,r2_0..r2_{T-1},lr,seconds.
std::string metrics_csv(const std::vector<EpochMetrics>& history);

}  // namespace ni::train
