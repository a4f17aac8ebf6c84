#include <cmath>
#include <numeric>
#include <sstream>

#include "ni/experiment.hpp"
#include "ni/layers.hpp"

namespace ni::exp {

double AblationRow::mean_r2() const {
  return r2.empty() ? 0.0 : std::accumulate(r2.begin(), r2.end(), 0.0) / static_cast<double>(r2.size());
}

namespace {

AblationRow evaluate_row(const core::Model& model, const fuzzy::RegressionDataset& data,
                         const core::ForwardOptions& options, std::string kind, std::string setting,
                         std::size_t value) {
  const Array x = fuzzy::take_rows(data.inputs, data.validation);
  const Array y = fuzzy::take_rows(data.targets, data.validation);
  const Array pred = core::predict_values(model, x, options);
  AblationRow row;
  row.kind = std::move(kind);
  row.setting = std::move(setting);
  row.value = value;
  row.finite = pred.all_finite();
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) se += (pred[i] - y[i]) * (pred[i] - y[i]);
  row.loss = se / static_cast<double>(pred.size());
  row.r2 = fuzzy::r2_per_task(pred, y);
  return row;
}

std::vector<std::vector<bool>> keep_all(const core::Model& m) {
  std::vector<std::vector<bool>> keep;
  for (std::size_t s = 0; s < m.ids.scripts.size(); ++s) keep.emplace_back(m.function_count(s), true);
  return keep;
}

}  // namespace

std::vector<AblationRow> ablate_drop(const core::Model& model, const fuzzy::RegressionDataset& data,
                                     std::uint64_t seed) {
  std::vector<AblationRow> rows;
  const core::FunctionMask full = core::drop_functions(model, keep_all(model));
  core::ForwardOptions o;
  o.keep = &full;
  rows.push_back(evaluate_row(model, data, o, "drop", "none", 0));

  for (std::size_t s = 0; s < model.ids.scripts.size(); ++s) {
    for (std::size_t u = 0; u < model.function_count(s); ++u) {
      if (model.function_count(s) < 2) continue;
      auto keep = keep_all(model);
      keep[s][u] = false;
      const core::FunctionMask mask = core::drop_functions(model, keep);
      o.keep = &mask;
      rows.push_back(evaluate_row(model, data, o, "drop", "s" + std::to_string(s) + ".fn" + std::to_string(u), 1));
    }
  }

  // Curve: the first k functions of a seeded order dropped in every script.
  std::vector<std::vector<std::size_t>> order;
  fuzzy::Rng rng(seed);
  std::size_t fewest = model.function_count(0);
  for (std::size_t s = 0; s < model.ids.scripts.size(); ++s) {
    std::vector<std::size_t> perm(model.function_count(s));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(fuzzy::uniform01(rng) * static_cast<double>(i + 1));
      std::swap(perm[i], perm[std::min(i, j)]);
    }
    order.push_back(perm);
    fewest = std::min(fewest, perm.size());
  }
  for (std::size_t k = 1; k < fewest; ++k) {
    auto keep = keep_all(model);
    for (std::size_t s = 0; s < order.size(); ++s) {
      for (std::size_t i = 0; i < k; ++i) keep[s][order[s][i]] = false;
    }
    const core::FunctionMask mask = core::drop_functions(model, keep);
    o.keep = &mask;
    AblationRow r = evaluate_row(model, data, o, "drop_curve", "k=" + std::to_string(k), k);
    r.seed = seed;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AblationRow> ablate_anytime(const core::Model& model, const fuzzy::RegressionDataset& data,
                                        const std::vector<std::size_t>& iterations) {
  for (std::size_t n : iterations) {
    if (n < 1) throw Error("invalid_sweep", "function iterations must be >= 1");
  }
  std::vector<AblationRow> rows;
  for (std::size_t n : iterations) {
    core::ForwardOptions o;
    o.iterations = n;
    rows.push_back(evaluate_row(model, data, o, "anytime", "n_i=" + std::to_string(n), n));
  }
  return rows;
}

std::vector<AblationRow> ablate_extend(const core::Model& model, const fuzzy::RegressionDataset& data,
                                       const std::vector<std::size_t>& added, const std::vector<std::uint64_t>& seeds,
                                       const train::TrainConfig& config) {
  std::vector<AblationRow> rows;
  for (std::size_t k : added) {
    for (std::uint64_t seed : seeds) {
      core::Model m = model;
      if (k > 0) core::add_functions(m, k, core::FunctionInit{seed * 1000 + k, std::nullopt});
      train::ParamGroups groups = train::build_param_groups(m, train::Regime::cls_only);
      for (core::ParamId id = 0; id < m.params.size(); ++id) {
        if (m.params[id].per_function) groups.extra.push_back(id);
      }
      train::TrainConfig tc = config;
      tc.seed = seed;
      train::finetune(m, data, groups, tc, seed);
      AblationRow r = evaluate_row(m, data, {}, "extend", "added=" + std::to_string(k), k);
      r.seed = seed;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  const std::size_t tasks = rows.empty() ? 0 : rows.front().r2.size();
  os << "kind,setting,value,seed,loss,mean_r2";
  for (std::size_t j = 0; j < tasks; ++j) os << ",r2_" << j;
  os << ",finite\n";
  os.precision(17);
  for (const AblationRow& r : rows) {
    os << r.kind << ',' << r.setting << ',' << r.value << ',' << r.seed << ',' << r.loss << ',' << r.mean_r2();
    for (double v : r.r2) os << ',' << v;
    os << ',' << (r.finite ? "true" : "false") << '\n';
  }
  return os.str();
}

RegimeResult run_regime(const core::Model& pretrained, const fuzzy::RegressionDataset& data, train::Regime regime,
                        std::uint64_t seed, const train::TrainConfig& config) {
  core::Model m = pretrained;
  const train::ParamGroups groups = train::build_param_groups(m, regime);
  train::TrainConfig tc = config;
  tc.seed = seed;
  RegimeResult r{regime, seed, train::finetune(m, data, groups, tc, seed), {}};
  r.validation = train::evaluate(m, fuzzy::take_rows(data.inputs, data.validation),
                                 fuzzy::take_rows(data.targets, data.validation));
  return r;
}

}  // namespace ni::exp
