#pragma once

// Experiment configuration, dataset manifests, checkpoints, routing traces
// and the structural ablations (drop, extend, anytime).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ni/fuzzy.hpp"
#include "ni/model.hpp"
#include "ni/training.hpp"

namespace ni::exp {

namespace fs = std::filesystem;
using Json = nlohmann::json;

/// Raised for input/output and format problems. category() is the short
/// machine-readable tag the CLI prints.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what) : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

struct TaskSpec {
  std::size_t n_vars = 5;
  std::size_t pretrain_tasks = 8;
  std::size_t adaptation_tasks = 4;
  std::size_t samples = 16384;  // per task family
};

struct OptimizerSpec {
  double pretrain_lr = 0.006;
  double finetune_lr = 0.05;
  std::size_t batch_size = 128;
  std::size_t micro_batch = 32;
  std::size_t pretrain_epochs = 20;
  std::size_t finetune_epochs = 3;
  bool pretrain_rectified = false;
  bool finetune_rectified = true;  // RAdam; plain Adam at 0.05 diverges when everything is trainable
  std::optional<train::Schedule> cosine;
};

struct Seeds {
  std::uint64_t data = 0;   // truth tables and samples
  std::uint64_t model = 0;  // parameter init
  std::uint64_t train = 0;  // batch order
};

struct AblationSpec {
  std::vector<std::size_t> added_functions{0, 1, 2};
  std::vector<std::size_t> iterations;  // empty: 1..2 * trained
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct ExperimentConfig {
  core::ModelConfig model;
  TaskSpec tasks;
  OptimizerSpec optimizer;
  train::Regime regime = train::Regime::all;
  Seeds seeds;
  std::string output_dir = "runs";
  AblationSpec ablation;

  /// The desk-scale defaults: the model widths, 8 + 4 tasks of N = 5.
  static ExperimentConfig desk();
  void validate() const;
};

Json to_json(const core::ModelConfig& c);
/// Keys absent from j keep their value in base.
core::ModelConfig model_config_from_json(const Json& j, core::ModelConfig base = {});
Json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are an error.
ExperimentConfig experiment_config_from_json(const Json& j);

/// 16 hex digits of FNV-1a over the compact JSON form.
std::string config_hash(const ExperimentConfig& c);

train::TrainConfig pretrain_config(const ExperimentConfig& c);
train::TrainConfig finetune_config(const ExperimentConfig& c);

// ---- datasets ----

struct DatasetManifest {
  std::size_t n_vars = 5;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::vector<fuzzy::FuzzyExpr> pretrain;
  std::vector<fuzzy::FuzzyExpr> adaptation;

  std::uint64_t pretrain_sample_seed() const { return seed * 2 + 1; }
  std::uint64_t adaptation_sample_seed() const { return seed * 2 + 2; }
  fuzzy::RegressionDataset pretrain_data() const;
  fuzzy::RegressionDataset adaptation_data() const;
  bool operator==(const DatasetManifest&) const = default;
};

/// Distinct, non-constant truth tables drawn from the data seed, pretrain
/// block first then the reserved adaptation block.
DatasetManifest generate_manifest(const TaskSpec& spec, std::uint64_t seed);

Json to_json(const DatasetManifest& m);
DatasetManifest dataset_manifest_from_json(const Json& j);

// ---- files ----

Json read_json(const fs::path& path);
/// Refuses to replace an existing file unless overwrite is set.
void write_text(const fs::path& path, const std::string& text, bool overwrite);
void check_writable(const fs::path& path, bool overwrite);

// ---- checkpoints ----

/// A directory holding manifest.json (config, tensor names, shapes, byte
/// offsets) and params.bin (little-endian float64). With a train state,
/// state.json and state.bin hold optimizer moments, history and the best
/// parameters as well.
struct Checkpoint {
  core::Model model;
  std::optional<train::TrainState> state;
  Json extra;  // free-form provenance (experiment config, hash)
};

void save_checkpoint(const fs::path& dir, const core::Model& model, const train::TrainState* state,
                     const Json& extra, bool overwrite);
/// When expected is given the tensors are checked against it instead of the
/// stored config; any disagreement names the tensor.
Checkpoint load_checkpoint(const fs::path& dir, const std::optional<core::ModelConfig>& expected = std::nullopt);

// ---- routing traces ----

struct TraceRecord {
  std::size_t sample = 0;
  std::size_t script = 0;
  std::size_t iteration = 0;
  Array compat;  // [n_f, set size]
  Array types;   // [set size, d_type]
};

/// One record per (sample, script, iteration), samples in order.
std::vector<TraceRecord> collect_trace(const core::Model& model, const Array& inputs,
                                       const core::ForwardOptions& options = {});
Json to_json(const TraceRecord& r);
TraceRecord trace_record_from_json(const Json& j);
void write_trace(std::ostream& os, const std::vector<TraceRecord>& records);

// ---- ablations ----

struct AblationRow {
  std::string kind;     // drop / extend / anytime
  std::string setting;  // e.g. "s0.fn2", "k=3", "n_i=4", "added=2 seed=1"
  std::size_t value = 0;
  std::uint64_t seed = 0;
  double loss = 0.0;
  std::vector<double> r2;
  bool finite = true;

  double mean_r2() const;
};

/// Baseline, every single (script, function) drop, then k = 1..n_f-1
/// functions dropped per script in a seeded random order.
std::vector<AblationRow> ablate_drop(const core::Model& model, const fuzzy::RegressionDataset& data,
                                     std::uint64_t seed);
/// R^2 for each iteration count; throws for n_i < 1.
std::vector<AblationRow> ablate_anytime(const core::Model& model, const fuzzy::RegressionDataset& data,
                                        const std::vector<std::size_t>& iterations);
/// For each (k, seed): k functions added per script, then finetuning of
/// fresh CLS tokens plus every signature and code on the adaptation data.
std::vector<AblationRow> ablate_extend(const core::Model& model, const fuzzy::RegressionDataset& data,
                                       const std::vector<std::size_t>& added, const std::vector<std::uint64_t>& seeds,
                                       const train::TrainConfig& config);

std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Model finetuned under a regime on data, with CLS and head outputs
/// matched to the task count.
struct RegimeResult {
  train::Regime regime;
  std::uint64_t seed;
  train::TrainState state;
  train::Evaluation validation;
};
RegimeResult run_regime(const core::Model& pretrained, const fuzzy::RegressionDataset& data, train::Regime regime,
                        std::uint64_t seed, const train::TrainConfig& config);

}  // namespace ni::exp
