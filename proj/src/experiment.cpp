#include "ni/experiment.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace ni::exp {

namespace {

// Reads fields out of a JSON object and complains about any it did not use.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw Error("config", where_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw Error("config", where_ + "." + key + ": " + e.what());
    }
  }

  const Json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw Error("config", "unknown key '" + where_ + "." + k + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.model.cls_tokens = c.tasks.pretrain_tasks;
  c.model.inputs = c.tasks.n_vars;
  c.model.signatures_trainable = true;
  return c;
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw Error("config", e.what());
  }
  if (tasks.n_vars < 1 || tasks.n_vars > 20) throw Error("config", "tasks.n_vars must be in [1, 20]");
  if (tasks.pretrain_tasks < 1 || tasks.adaptation_tasks < 1) throw Error("config", "task counts must be >= 1");
  if (tasks.samples < 10) throw Error("config", "tasks.samples must be >= 10");
  if (model.inputs != tasks.n_vars && model.positional != core::PositionalMode::none) {
    throw Error("config", "model.inputs (" + std::to_string(model.inputs) + ") differs from tasks.n_vars (" +
                              std::to_string(tasks.n_vars) + ")");
  }
  if (model.cls_tokens * model.d_out != tasks.pretrain_tasks) {
    throw Error("config", "model.cls_tokens * d_out must equal tasks.pretrain_tasks");
  }
  if (!(optimizer.pretrain_lr > 0.0) || !(optimizer.finetune_lr > 0.0)) {
    throw Error("config", "learning rates must be positive");
  }
  if (optimizer.batch_size < 1 || optimizer.micro_batch < 1) throw Error("config", "batch sizes must be >= 1");
  if (optimizer.cosine && optimizer.cosine->decay_steps < 1) {
    throw Error("config", "optimizer.cosine.decay_steps must be >= 1");
  }
  for (std::size_t n : ablation.iterations) {
    if (n < 1) throw Error("invalid_sweep", "ablation.iterations values must be >= 1");
  }
  if (ablation.seeds.empty()) throw Error("config", "ablation.seeds must not be empty");
}

Json to_json(const core::ModelConfig& c) {
  return Json{{"d_in", c.d_in},
              {"d_out", c.d_out},
              {"dim", c.dim},
              {"code_dim", c.code_dim},
              {"type_dim", c.type_dim},
              {"key_dim", c.key_dim},
              {"heads", c.heads},
              {"scripts", c.scripts},
              {"iterations", c.iterations},
              {"locs", c.locs},
              {"functions", c.functions},
              {"tau", c.tau},
              {"routing_eps", c.routing_eps},
              {"inputs", c.inputs},
              {"cls_tokens", c.cls_tokens},
              {"positional", core::to_string(c.positional)},
              {"grid_rows", c.grid_rows},
              {"grid_cols", c.grid_cols},
              {"rel_pos_dim", c.rel_pos_dim},
              {"head_layer_norm", c.head_layer_norm},
              {"signatures_trainable", c.signatures_trainable},
              {"codes_trainable", c.codes_trainable}};
}

core::ModelConfig model_config_from_json(const Json& j, core::ModelConfig base) {
  core::ModelConfig c = base;
  Fields f(j, "model");
  f.get("d_in", c.d_in);
  f.get("d_out", c.d_out);
  f.get("dim", c.dim);
  f.get("code_dim", c.code_dim);
  f.get("type_dim", c.type_dim);
  f.get("key_dim", c.key_dim);
  f.get("heads", c.heads);
  f.get("scripts", c.scripts);
  f.get("iterations", c.iterations);
  f.get("locs", c.locs);
  f.get("functions", c.functions);
  f.get("tau", c.tau);
  f.get("routing_eps", c.routing_eps);
  f.get("inputs", c.inputs);
  f.get("cls_tokens", c.cls_tokens);
  std::string pos = core::to_string(c.positional);
  f.get("positional", pos);
  try {
    c.positional = core::positional_mode_from_string(pos);
  } catch (const std::invalid_argument& e) {
    throw Error("config", e.what());
  }
  f.get("grid_rows", c.grid_rows);
  f.get("grid_cols", c.grid_cols);
  f.get("rel_pos_dim", c.rel_pos_dim);
  f.get("head_layer_norm", c.head_layer_norm);
  f.get("signatures_trainable", c.signatures_trainable);
  f.get("codes_trainable", c.codes_trainable);
  f.finish();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  Json opt{{"pretrain_lr", c.optimizer.pretrain_lr},
           {"finetune_lr", c.optimizer.finetune_lr},
           {"batch_size", c.optimizer.batch_size},
           {"micro_batch", c.optimizer.micro_batch},
           {"pretrain_epochs", c.optimizer.pretrain_epochs},
           {"finetune_epochs", c.optimizer.finetune_epochs},
           {"pretrain_rectified", c.optimizer.pretrain_rectified},
           {"finetune_rectified", c.optimizer.finetune_rectified}};
  if (c.optimizer.cosine) {
    opt["cosine"] = Json{{"eta_min", c.optimizer.cosine->eta_min}, {"decay_steps", c.optimizer.cosine->decay_steps}};
  }
  return Json{{"model", to_json(c.model)},
              {"tasks",
               {{"n_vars", c.tasks.n_vars},
                {"pretrain_tasks", c.tasks.pretrain_tasks},
                {"adaptation_tasks", c.tasks.adaptation_tasks},
                {"samples", c.tasks.samples}}},
              {"optimizer", opt},
              {"regime", train::to_string(c.regime)},
              {"seeds", {{"data", c.seeds.data}, {"model", c.seeds.model}, {"train", c.seeds.train}}},
              {"output_dir", c.output_dir},
              {"ablation",
               {{"added_functions", c.ablation.added_functions},
                {"iterations", c.ablation.iterations},
                {"seeds", c.ablation.seeds}}}};
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c = ExperimentConfig::desk();
  Fields f(j, "config");
  if (const Json* m = f.sub("model")) c.model = model_config_from_json(*m, c.model);
  if (const Json* t = f.sub("tasks")) {
    Fields g(*t, "tasks");
    g.get("n_vars", c.tasks.n_vars);
    g.get("pretrain_tasks", c.tasks.pretrain_tasks);
    g.get("adaptation_tasks", c.tasks.adaptation_tasks);
    g.get("samples", c.tasks.samples);
    g.finish();
  }
  if (const Json* o = f.sub("optimizer")) {
    Fields g(*o, "optimizer");
    g.get("pretrain_lr", c.optimizer.pretrain_lr);
    g.get("finetune_lr", c.optimizer.finetune_lr);
    g.get("batch_size", c.optimizer.batch_size);
    g.get("micro_batch", c.optimizer.micro_batch);
    g.get("pretrain_epochs", c.optimizer.pretrain_epochs);
    g.get("finetune_epochs", c.optimizer.finetune_epochs);
    g.get("pretrain_rectified", c.optimizer.pretrain_rectified);
    g.get("finetune_rectified", c.optimizer.finetune_rectified);
    if (const Json* cs = g.sub("cosine")) {
      train::Schedule s;
      Fields h(*cs, "optimizer.cosine");
      h.get("eta_min", s.eta_min);
      h.get("decay_steps", s.decay_steps);
      h.finish();
      c.optimizer.cosine = s;
    }
    g.finish();
  }
  std::string regime = train::to_string(c.regime);
  f.get("regime", regime);
  try {
    c.regime = train::regime_from_string(regime);
  } catch (const std::invalid_argument& e) {
    throw Error("config", e.what());
  }
  if (const Json* s = f.sub("seeds")) {
    Fields g(*s, "seeds");
    g.get("data", c.seeds.data);
    g.get("model", c.seeds.model);
    g.get("train", c.seeds.train);
    g.finish();
  }
  f.get("output_dir", c.output_dir);
  if (const Json* a = f.sub("ablation")) {
    Fields g(*a, "ablation");
    g.get("added_functions", c.ablation.added_functions);
    g.get("iterations", c.ablation.iterations);
    g.get("seeds", c.ablation.seeds);
    g.finish();
  }
  f.finish();
  return c;
}

std::string config_hash(const ExperimentConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

namespace {

train::TrainConfig base_train_config(const ExperimentConfig& c) {
  train::TrainConfig t;
  t.batch_size = c.optimizer.batch_size;
  t.micro_batch = c.optimizer.micro_batch;
  t.cosine = c.optimizer.cosine;
  t.seed = c.seeds.train;
  return t;
}

}  // namespace

train::TrainConfig pretrain_config(const ExperimentConfig& c) {
  train::TrainConfig t = base_train_config(c);
  t.epochs = c.optimizer.pretrain_epochs;
  t.adam.lr = c.optimizer.pretrain_lr;
  t.adam.rectified = c.optimizer.pretrain_rectified;
  return t;
}

train::TrainConfig finetune_config(const ExperimentConfig& c) {
  train::TrainConfig t = base_train_config(c);
  t.epochs = c.optimizer.finetune_epochs;
  t.adam.lr = c.optimizer.finetune_lr;
  t.adam.rectified = c.optimizer.finetune_rectified;
  return t;
}

// ---- datasets ----

fuzzy::RegressionDataset DatasetManifest::pretrain_data() const {
  return fuzzy::gen_dataset(pretrain, samples, pretrain_sample_seed());
}

fuzzy::RegressionDataset DatasetManifest::adaptation_data() const {
  return fuzzy::gen_dataset(adaptation, samples, adaptation_sample_seed());
}

DatasetManifest generate_manifest(const TaskSpec& spec, std::uint64_t seed) {
  const std::size_t wanted = spec.pretrain_tasks + spec.adaptation_tasks;
  const std::size_t entries = std::size_t{1} << spec.n_vars;
  // 2^(2^N) tables minus the two constants
  if (spec.n_vars < 5) {
    const std::size_t family = (std::size_t{1} << entries) - 2;
    if (wanted > family) {
      throw Error("config", std::to_string(wanted) + " distinct non-constant tables requested, only " +
                                std::to_string(family) + " exist for N=" + std::to_string(spec.n_vars));
    }
  }
  DatasetManifest m;
  m.n_vars = spec.n_vars;
  m.samples = spec.samples;
  m.seed = seed;
  fuzzy::Rng rng(seed);
  std::set<std::vector<std::uint8_t>> seen;
  std::vector<fuzzy::FuzzyExpr> all;
  while (all.size() < wanted) {
    fuzzy::FuzzyExpr e = fuzzy::sample_truth_table(spec.n_vars, rng);
    const auto ones = std::count(e.truth_table.begin(), e.truth_table.end(), std::uint8_t{1});
    // constant tables have zero target variance, so R^2 is undefined on them
    if (ones == 0 || static_cast<std::size_t>(ones) == entries) continue;
    if (!seen.insert(e.truth_table).second) continue;
    all.push_back(std::move(e));
  }
  m.pretrain.assign(all.begin(), all.begin() + static_cast<long>(spec.pretrain_tasks));
  m.adaptation.assign(all.begin() + static_cast<long>(spec.pretrain_tasks), all.end());
  return m;
}

Json to_json(const DatasetManifest& m) {
  Json pre = Json::array(), ad = Json::array();
  for (const auto& e : m.pretrain) pre.push_back(e.to_hex());
  for (const auto& e : m.adaptation) ad.push_back(e.to_hex());
  return Json{{"format", "ni-dataset/1"},
              {"n_vars", m.n_vars},
              {"samples", m.samples},
              {"seed", m.seed},
              {"pretrain_sample_seed", m.pretrain_sample_seed()},
              {"adaptation_sample_seed", m.adaptation_sample_seed()},
              {"split", "80/20 by seeded permutation"},
              {"pretrain", pre},
              {"adaptation", ad}};
}

DatasetManifest dataset_manifest_from_json(const Json& j) {
  try {
    if (j.at("format") != "ni-dataset/1") throw Error("format", "not a dataset manifest");
    DatasetManifest m;
    m.n_vars = j.at("n_vars").get<std::size_t>();
    m.samples = j.at("samples").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& h : j.at("pretrain")) m.pretrain.push_back(fuzzy::FuzzyExpr::from_hex(m.n_vars, h));
    for (const auto& h : j.at("adaptation")) m.adaptation.push_back(fuzzy::FuzzyExpr::from_hex(m.n_vars, h));
    if (m.pretrain.empty() || m.adaptation.empty()) throw Error("format", "dataset manifest lists no tasks");
    return m;
  } catch (const Json::exception& e) {
    throw Error("format", std::string("dataset manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw Error("format", std::string("dataset manifest: ") + e.what());
  }
}

// ---- files ----

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error("format", path.string() + ": " + e.what());
  }
}

void check_writable(const fs::path& path, bool overwrite) {
  if (fs::exists(path) && !overwrite) {
    throw Error("exists", path.string() + " already exists (pass --overwrite to replace it)");
  }
}

void write_text(const fs::path& path, const std::string& text, bool overwrite) {
  check_writable(path, overwrite);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("io", "cannot write " + path.string());
}

}  // namespace ni::exp
