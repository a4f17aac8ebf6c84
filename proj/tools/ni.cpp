// ni: dataset generation, pretraining, finetuning, ablations, routing traces
// and evaluation for the Neural Interpreter on fuzzy Boolean regression.
//
// Every failure prints one line "error: <category>: <message>" on stderr and
// exits nonzero.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ni/experiment.hpp"
#include "ni/layers.hpp"

using namespace ni;
using exp::Error;
using exp::Json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  bool overwrite = false;
};

// "a.b.c=value": value is parsed as JSON when it can be, else kept as a string.
void apply_set(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("usage", "--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &j;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = Json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

exp::ExperimentConfig load_config(const Common& c) {
  Json j = exp::to_json(exp::ExperimentConfig::desk());
  if (!c.config_path.empty()) j.merge_patch(exp::read_json(c.config_path));
  for (const std::string& s : c.sets) apply_set(j, s);
  exp::ExperimentConfig cfg = exp::experiment_config_from_json(j);
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON experiment config (keys as written by --print-config)");
  app->add_option("--set", c.sets, "Override a config key, e.g. --set model.tau=1.2 (repeatable)");
  app->add_flag("--overwrite", c.overwrite, "Replace existing outputs");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void say(const std::string& line) { std::cout << line << std::endl; }

exp::DatasetManifest load_data(const std::string& path) {
  return exp::dataset_manifest_from_json(exp::read_json(path));
}

Json provenance(const exp::ExperimentConfig& cfg, const std::string& command) {
  return Json{{"command", command}, {"experiment", exp::to_json(cfg)}, {"config_hash", exp::config_hash(cfg)}};
}

train::EpochCallback progress(const std::string& what) {
  return [what](const train::TrainState& s) {
    const auto& v = s.history.back();
    const auto& t = s.history[s.history.size() - 2];
    say(what + " epoch " + std::to_string(v.epoch) + " train_loss " + fmt(t.loss) + " val_loss " + fmt(v.loss) +
        " val_r2 " + fmt(v.mean_r2()) + " seconds " + fmt(v.seconds));
  };
}

// Which task family of the manifest a checkpoint's CLS tokens were trained on.
fuzzy::RegressionDataset matching_data(const exp::DatasetManifest& m, const core::Model& model,
                                       const std::string& split) {
  if (split == "pretrain") return m.pretrain_data();
  if (split == "adaptation") return m.adaptation_data();
  if (split != "auto") throw Error("usage", "--tasks must be auto, pretrain or adaptation");
  const std::size_t outputs = model.config.cls_tokens * model.config.d_out;
  if (outputs == m.pretrain.size()) return m.pretrain_data();
  if (outputs == m.adaptation.size()) return m.adaptation_data();
  throw Error("checkpoint_mismatch", "checkpoint predicts " + std::to_string(outputs) +
                                         " tasks, dataset has " + std::to_string(m.pretrain.size()) + " + " +
                                         std::to_string(m.adaptation.size()));
}

std::vector<std::size_t> default_sweep(const core::Model& m) {
  std::vector<std::size_t> v;
  for (std::size_t n = 1; n <= 2 * m.config.iterations; ++n) v.push_back(n);
  return v;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Neural Interpreter experiments on fuzzy Boolean regression"};
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the desk-scale default config and exit");

  // gen
  Common gen_c;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_out = "data/dataset.json";
  std::string gen_csv;
  auto* gen = app.add_subcommand("gen", "Sample truth tables and write a dataset manifest");
  add_common(gen, gen_c);
  gen->add_option("--seed", gen_seed, "Data seed (truth tables and samples)")->required();
  gen->add_option("--out", gen_out, "Manifest path");
  gen->add_option("--csv", gen_csv, "Also export the pretraining samples as CSV");

  // pretrain
  Common pre_c;
  std::optional<std::uint64_t> pre_seed;
  std::string pre_data, pre_out = "runs/pretrain", pre_resume;
  auto* pre = app.add_subcommand("pretrain", "Train a model on the pretraining tasks");
  add_common(pre, pre_c);
  pre->add_option("--seed", pre_seed, "Model init and batch-order seed")->required();
  pre->add_option("--data", pre_data, "Dataset manifest")->required();
  pre->add_option("--out", pre_out, "Checkpoint directory");
  pre->add_option("--resume", pre_resume, "Continue from a checkpoint with train state");

  // finetune
  Common ft_c;
  std::uint64_t ft_seed = 0;
  std::string ft_data, ft_ckpt, ft_out = "runs/finetune", ft_regime;
  auto* ft = app.add_subcommand("finetune", "Adapt a pretrained model to the reserved tasks");
  add_common(ft, ft_c);
  ft->add_option("--checkpoint", ft_ckpt, "Pretrained checkpoint")->required();
  ft->add_option("--data", ft_data, "Dataset manifest")->required();
  ft->add_option("--regime", ft_regime, "cls_only, cls_plus_type or all (default from config)");
  ft->add_option("--seed", ft_seed, "CLS init and batch-order seed");
  ft->add_option("--out", ft_out, "Checkpoint directory");

  // ablate
  Common ab_c;
  std::string ab_ckpt, ab_data, ab_kind, ab_out;
  std::uint64_t ab_seed = 0;
  auto* ab = app.add_subcommand("ablate", "Drop functions, add functions or sweep iterations");
  add_common(ab, ab_c);
  ab->add_option("--checkpoint", ab_ckpt, "Trained checkpoint")->required();
  ab->add_option("--data", ab_data, "Dataset manifest")->required();
  ab->add_option("--kind", ab_kind, "drop, extend or anytime")->required()->check(CLI::IsMember({"drop", "extend", "anytime"}));
  ab->add_option("--seed", ab_seed, "Seed for the drop order");
  ab->add_option("--out", ab_out, "Report CSV (default: stdout)");

  // trace
  Common tr_c;
  std::string tr_ckpt, tr_data, tr_out, tr_tasks = "auto";
  std::size_t tr_samples = 16;
  auto* tr = app.add_subcommand("trace", "Export compatibilities and types as JSON lines");
  add_common(tr, tr_c);
  tr->add_option("--checkpoint", tr_ckpt, "Trained checkpoint")->required();
  tr->add_option("--data", tr_data, "Dataset manifest")->required();
  tr->add_option("--samples", tr_samples, "Validation samples to trace");
  tr->add_option("--tasks", tr_tasks, "auto, pretrain or adaptation");
  tr->add_option("--out", tr_out, "JSONL path (default: stdout)");

  // eval
  Common ev_c;
  std::string ev_ckpt, ev_data, ev_tasks = "auto";
  std::optional<std::size_t> ev_iters;
  auto* ev = app.add_subcommand("eval", "Validation loss and R^2 of a checkpoint");
  add_common(ev, ev_c);
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset manifest")->required();
  ev->add_option("--tasks", ev_tasks, "auto, pretrain or adaptation");
  ev->add_option("--iterations", ev_iters, "Override n_i at evaluation")->check(CLI::PositiveNumber);

  app.require_subcommand(0, 1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    throw Error("usage", e.what());
  }
  if (print_config) {
    say(exp::to_json(exp::ExperimentConfig::desk()).dump(2));
    return 0;
  }
  if (app.get_subcommands().empty()) throw Error("usage", "a subcommand is required (gen, pretrain, finetune, ablate, trace, eval)");

  if (*gen) {
    exp::ExperimentConfig cfg = load_config(gen_c);
    cfg.seeds.data = *gen_seed;
    cfg.validate();
    exp::check_writable(gen_out, gen_c.overwrite);
    const exp::DatasetManifest m = exp::generate_manifest(cfg.tasks, cfg.seeds.data);
    exp::write_text(gen_out, exp::to_json(m).dump(2) + "\n", gen_c.overwrite);
    say("wrote " + gen_out + " (" + std::to_string(m.pretrain.size()) + " pretrain + " +
        std::to_string(m.adaptation.size()) + " adaptation tables, N=" + std::to_string(m.n_vars) + ")");
    if (!gen_csv.empty()) {
      exp::check_writable(gen_csv, gen_c.overwrite);
      std::ostringstream os;
      fuzzy::write_csv(os, m.pretrain_data());
      exp::write_text(gen_csv, os.str(), gen_c.overwrite);
      say("wrote " + gen_csv);
    }
    return 0;
  }

  if (*pre) {
    exp::ExperimentConfig cfg = load_config(pre_c);
    cfg.seeds.model = *pre_seed;
    cfg.seeds.train = *pre_seed;
    const exp::DatasetManifest dm = load_data(pre_data);
    cfg.tasks.n_vars = dm.n_vars;
    cfg.tasks.samples = dm.samples;
    cfg.tasks.pretrain_tasks = dm.pretrain.size();
    cfg.tasks.adaptation_tasks = dm.adaptation.size();
    cfg.model.inputs = dm.n_vars;
    cfg.model.cls_tokens = dm.pretrain.size() / cfg.model.d_out;
    cfg.validate();
    const fs::path out = pre_out;
    exp::check_writable(out / "manifest.json", pre_c.overwrite);
    core::Model model;
    train::TrainState state;
    if (!pre_resume.empty()) {
      exp::Checkpoint ck = exp::load_checkpoint(pre_resume, cfg.model);
      if (!ck.state) throw Error("checkpoint", pre_resume + " holds no train state to resume from");
      model = std::move(ck.model);
      state = std::move(*ck.state);
      train::restore_last(model, state);
    } else {
      model = core::Model::create(cfg.model, cfg.seeds.model);
      state.seed = cfg.seeds.train;
    }
    const fuzzy::RegressionDataset data = dm.pretrain_data();
    say("pretraining " + std::to_string(model.params.value_count()) + " parameters on " +
        std::to_string(data.train.size()) + " samples, config " + exp::config_hash(cfg));
    train::fit(model, data, exp::pretrain_config(cfg), state, progress("pretrain"));
    exp::save_checkpoint(out, model, &state, provenance(cfg, "pretrain"), pre_c.overwrite);
    exp::write_text(out / "metrics.csv", train::metrics_csv(state.history), true);
    const auto& best = state.history.at(2 * state.best_epoch - 1);
    say("best epoch " + std::to_string(state.best_epoch) + " val_r2 " + fmt(best.mean_r2()) + ", wrote " + out.string());
    return 0;
  }

  if (*ft) {
    exp::ExperimentConfig cfg = load_config(ft_c);
    if (!ft_regime.empty()) cfg.regime = train::regime_from_string(ft_regime);
    const exp::DatasetManifest dm = load_data(ft_data);
    const fs::path out = ft_out;
    exp::check_writable(out / "manifest.json", ft_c.overwrite);
    exp::Checkpoint ck = exp::load_checkpoint(ft_ckpt);
    const fuzzy::RegressionDataset data = dm.adaptation_data();
    if (data.num_tasks() % ck.model.config.d_out != 0) {
      throw Error("checkpoint_mismatch", "adaptation task count is not a multiple of d_out");
    }
    train::TrainConfig tc = exp::finetune_config(cfg);
    tc.seed = ft_seed;
    const train::ParamGroups groups = train::build_param_groups(ck.model, cfg.regime);
    say("finetuning regime " + train::to_string(cfg.regime) + " on " + std::to_string(data.num_tasks()) + " tasks");
    train::TrainState st = train::finetune(ck.model, data, groups, tc, ft_seed, progress("finetune"));
    Json extra = provenance(cfg, "finetune");
    extra["regime"] = train::to_string(cfg.regime);
    extra["base_checkpoint"] = ft_ckpt;
    exp::save_checkpoint(out, ck.model, &st, extra, ft_c.overwrite);
    exp::write_text(out / "metrics.csv", train::metrics_csv(st.history), true);
    const auto& best = st.history.at(2 * st.best_epoch - 1);
    say("best epoch " + std::to_string(st.best_epoch) + " val_r2 " + fmt(best.mean_r2()) + ", wrote " + out.string());
    return 0;
  }

  if (*ab) {
    exp::ExperimentConfig cfg = load_config(ab_c);
    cfg.validate();
    if (!ab_out.empty()) exp::check_writable(ab_out, ab_c.overwrite);
    const exp::DatasetManifest dm = load_data(ab_data);
    const exp::Checkpoint ck = exp::load_checkpoint(ab_ckpt);
    std::vector<exp::AblationRow> rows;
    if (ab_kind == "drop") {
      rows = exp::ablate_drop(ck.model, matching_data(dm, ck.model, "auto"), ab_seed);
    } else if (ab_kind == "anytime") {
      const auto sweep = cfg.ablation.iterations.empty() ? default_sweep(ck.model) : cfg.ablation.iterations;
      rows = exp::ablate_anytime(ck.model, matching_data(dm, ck.model, "auto"), sweep);
    } else {
      rows = exp::ablate_extend(ck.model, dm.adaptation_data(), cfg.ablation.added_functions, cfg.ablation.seeds,
                                exp::finetune_config(cfg));
    }
    const std::string csv = exp::ablation_csv(rows);
    if (ab_out.empty()) std::cout << csv;
    else exp::write_text(ab_out, csv, ab_c.overwrite);
    return 0;
  }

  if (*tr) {
    if (!tr_out.empty()) exp::check_writable(tr_out, tr_c.overwrite);
    const exp::DatasetManifest dm = load_data(tr_data);
    const exp::Checkpoint ck = exp::load_checkpoint(tr_ckpt);
    const fuzzy::RegressionDataset data = matching_data(dm, ck.model, tr_tasks);
    const std::size_t n = std::min(tr_samples, data.validation.size());
    if (n == 0) throw Error("usage", "--samples must be >= 1");
    const Array x = fuzzy::take_rows(data.inputs, std::span(data.validation).first(n));
    const auto records = exp::collect_trace(ck.model, x);
    std::ostringstream os;
    exp::write_trace(os, records);
    if (tr_out.empty()) std::cout << os.str();
    else exp::write_text(tr_out, os.str(), tr_c.overwrite);
    return 0;
  }

  if (*ev) {
    const exp::DatasetManifest dm = load_data(ev_data);
    const exp::Checkpoint ck = exp::load_checkpoint(ev_ckpt);
    const fuzzy::RegressionDataset data = matching_data(dm, ck.model, ev_tasks);
    core::ForwardOptions o;
    o.iterations = ev_iters;
    const train::Evaluation e = train::evaluate(ck.model, fuzzy::take_rows(data.inputs, data.validation),
                                                fuzzy::take_rows(data.targets, data.validation), o);
    std::ostringstream os;
    os << "val_loss " << fmt(e.loss) << " mean_r2 " << fmt(e.mean_r2()) << " r2";
    for (double r : e.r2) os << ' ' << fmt(r);
    say(os.str());
    return 0;
  }
  return 0;
}

int main(int argc, char** argv) {
  auto fail = [](const std::string& category, const std::string& what, int code) {
    std::string flat = what;
    for (char& ch : flat) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "error: " << category << ": " << flat << std::endl;
    return code;
  };
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    const std::string& c = e.category();
    const int code = c == "usage" || c == "config" || c == "invalid_sweep" ? 2
                     : c == "io" || c == "exists"                          ? 3
                                                                           : 4;
    return fail(c, e.what(), code);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), 5);
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), 4);
  } catch (const std::invalid_argument& e) {
    return fail("invalid_argument", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}
