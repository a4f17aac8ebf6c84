#include "ni/fuzzy.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace ni::fuzzy {

namespace {

void check_unit(double a, const char* op) {
  if (!(a >= 0.0 && a <= 1.0)) {
    throw std::domain_error(std::string(op) + ": value " + std::to_string(a) + " outside [0, 1]");
  }
}

}  // namespace

double fuzzy_and(double a, double b) {
  check_unit(a, "fuzzy_and");
  check_unit(b, "fuzzy_and");
  return a * b;
}

double fuzzy_not(double a) {
  check_unit(a, "fuzzy_not");
  return 1.0 - a;
}

double fuzzy_or(double a, double b) {
  check_unit(a, "fuzzy_or");
  check_unit(b, "fuzzy_or");
  return 1.0 - (1.0 - a) * (1.0 - b);
}

std::vector<std::size_t> FuzzyExpr::minterms() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < truth_table.size(); ++i) {
    if (truth_table[i]) out.push_back(i);
  }
  return out;
}

std::string FuzzyExpr::to_hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < truth_table.size(); i += 4) {
    unsigned nibble = 0;
    for (std::size_t b = 0; b < 4; ++b) {
      nibble <<= 1;
      if (i + b < truth_table.size() && truth_table[i + b]) nibble |= 1u;
    }
    out.push_back(digits[nibble]);
  }
  return out;
}

FuzzyExpr FuzzyExpr::from_hex(std::size_t n_vars, const std::string& hex) {
  if (n_vars < 1 || n_vars > 20) throw std::invalid_argument("n_vars must be in [1, 20]");
  const std::size_t entries = std::size_t{1} << n_vars;
  if (hex.size() != (entries + 3) / 4) {
    throw std::invalid_argument("truth table '" + hex + "' has the wrong length for " +
                                std::to_string(n_vars) + " variables");
  }
  FuzzyExpr e{n_vars, std::vector<std::uint8_t>(entries, 0)};
  for (std::size_t d = 0; d < hex.size(); ++d) {
    const char c = hex[d];
    unsigned v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else throw std::invalid_argument("truth table '" + hex + "' is not hex");
    for (std::size_t b = 0; b < 4; ++b) {
      const bool bit = (v >> (3 - b)) & 1u;
      const std::size_t i = d * 4 + b;
      if (i < entries) e.truth_table[i] = bit;
      else if (bit) throw std::invalid_argument("truth table '" + hex + "' sets padding bits");
    }
  }
  return e;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

FuzzyExpr sample_truth_table(std::size_t n_vars, Rng& rng) {
  if (n_vars < 1 || n_vars > 20) throw std::invalid_argument("n_vars must be in [1, 20]");
  FuzzyExpr e{n_vars, std::vector<std::uint8_t>(std::size_t{1} << n_vars)};
  for (auto& bit : e.truth_table) bit = static_cast<std::uint8_t>(rng() >> 63);
  return e;
}

double eval_fuzzy(const FuzzyExpr& expr, std::span<const double> x) {
  if (x.size() != expr.n_vars) {
    throw std::invalid_argument("eval_fuzzy: expression has " + std::to_string(expr.n_vars) +
                                " variables, got " + std::to_string(x.size()));
  }
  for (double v : x) check_unit(v, "eval_fuzzy");
  const std::size_t n = expr.n_vars;
  double acc = 0.0;
  bool first = true;
  for (std::size_t i = 0; i < expr.truth_table.size(); ++i) {
    if (!expr.truth_table[i]) continue;
    double term = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      const bool set = (i >> (n - 1 - k)) & 1u;
      term *= set ? x[k] : 1.0 - x[k];
    }
    acc = first ? term : 1.0 - (1.0 - acc) * (1.0 - term);
    first = false;
  }
  return acc;
}

RegressionDataset gen_dataset(const std::vector<FuzzyExpr>& exprs, std::size_t num_samples, std::uint64_t seed) {
  if (exprs.empty()) throw std::invalid_argument("gen_dataset needs at least one expression");
  if (num_samples < 10) throw std::invalid_argument("gen_dataset needs at least 10 samples");
  const std::size_t n = exprs.front().n_vars;
  for (const FuzzyExpr& e : exprs) {
    if (e.n_vars != n) throw std::invalid_argument("expressions disagree on the variable count");
  }
  const std::size_t t = exprs.size();
  RegressionDataset d;
  d.seed = seed;
  d.inputs = Array({num_samples, n});
  d.targets = Array({num_samples, t});
  Rng rng(seed);
  for (double& v : d.inputs.storage()) v = uniform01(rng);
  for (std::size_t s = 0; s < num_samples; ++s) {
    std::span<const double> x(d.inputs.data() + s * n, n);
    for (std::size_t j = 0; j < t; ++j) d.targets[s * t + j] = eval_fuzzy(exprs[j], x);
  }
  std::vector<std::size_t> perm(num_samples);
  std::iota(perm.begin(), perm.end(), 0);
  // Fisher-Yates with the same generator, so the split is tied to the seed.
  for (std::size_t i = num_samples - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(perm[i], perm[std::min(j, i)]);
  }
  const std::size_t n_train = num_samples * 4 / 5;
  d.train.assign(perm.begin(), perm.begin() + n_train);
  d.validation.assign(perm.begin() + n_train, perm.end());
  return d;
}

Array take_rows(const Array& a, std::span<const std::size_t> rows) {
  const std::size_t width = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = rows.size();
  Array out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) throw std::out_of_range("row index out of range");
    std::copy_n(a.data() + rows[r] * width, width, out.data() + r * width);
  }
  return out;
}

void write_csv(std::ostream& os, const RegressionDataset& data) {
  const std::size_t n = data.inputs.dim(1);
  const std::size_t t = data.num_tasks();
  for (std::size_t k = 0; k < n; ++k) os << (k ? "," : "") << 'x' << k;
  for (std::size_t j = 0; j < t; ++j) os << ",f" << j;
  os << '\n';
  const auto old = os.precision(17);
  for (std::size_t s = 0; s < data.num_samples(); ++s) {
    for (std::size_t k = 0; k < n; ++k) os << (k ? "," : "") << data.inputs[s * n + k];
    for (std::size_t j = 0; j < t; ++j) os << ',' << data.targets[s * t + j];
    os << '\n';
  }
  os.precision(old);
}

double r2_score(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw std::invalid_argument("r2_score: length mismatch");
  if (target.size() < 2) throw std::invalid_argument("r2_score needs at least two samples");
  const double mean = std::accumulate(target.begin(), target.end(), 0.0) / static_cast<double>(target.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
    ss_tot += (target[i] - mean) * (target[i] - mean);
  }
  if (ss_tot == 0.0) throw std::invalid_argument("r2_score: target variance is zero");
  return 1.0 - ss_res / ss_tot;
}

std::vector<double> r2_per_task(const Array& pred, const Array& target) {
  if (pred.shape() != target.shape() || pred.rank() != 2) {
    throw ShapeError("r2_per_task: prediction " + shape_string(pred.shape()) + " vs target " +
                     shape_string(target.shape()));
  }
  const std::size_t n = pred.dim(0);
  const std::size_t t = pred.dim(1);
  std::vector<double> out;
  std::vector<double> p(n), y(n);
  for (std::size_t j = 0; j < t; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = pred[i * t + j];
      y[i] = target[i * t + j];
    }
    out.push_back(r2_score(p, y));
  }
  return out;
}

}  // namespace ni::fuzzy
