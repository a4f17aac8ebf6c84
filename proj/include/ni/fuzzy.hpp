#pragma once

// Product fuzzy logic, random truth tables and the multi-task regression
// datasets built from them.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ni/tensor.hpp"

namespace ni::fuzzy {

/// Inputs must lie in [0, 1]; std::domain_error otherwise.
double fuzzy_and(double a, double b);
double fuzzy_or(double a, double b);
double fuzzy_not(double a);

/// A Boolean function of n_vars variables. Entry i of the truth table is the
/// value at the assignment whose binary encoding is i, variable 0 being the
/// most significant bit.
struct FuzzyExpr {
  std::size_t n_vars = 0;
  std::vector<std::uint8_t> truth_table;

  /// Assignments where the table is 1, ascending.
  std::vector<std::size_t> minterms() const;

  /// Hex digits, entries packed most significant bit first, four per digit.
  std::string to_hex() const;
  static FuzzyExpr from_hex(std::size_t n_vars, const std::string& hex);

  bool operator==(const FuzzyExpr&) const = default;
};

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(Rng& rng);

/// Each entry independent Bernoulli(0.5).
FuzzyExpr sample_truth_table(std::size_t n_vars, Rng& rng);

/// Canonical sum of products over the minterms, left-folded with fuzzy_or.
double eval_fuzzy(const FuzzyExpr& expr, std::span<const double> x);

struct RegressionDataset {
  Array inputs;   // [num_samples, N]
  Array targets;  // [num_samples, T]
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::uint64_t seed = 0;

  std::size_t num_samples() const { return inputs.dim(0); }
  std::size_t num_tasks() const { return targets.dim(1); }
};

/// num_samples points uniform on [0,1]^N, one target column per expression,
/// 80/20 split by a seeded permutation.
RegressionDataset gen_dataset(const std::vector<FuzzyExpr>& exprs, std::size_t num_samples, std::uint64_t seed);

/// Rows of a [num_samples, K] array selected by index.
Array take_rows(const Array& a, std::span<const std::size_t> rows);

/// Header x0..x{N-1},f0..f{T-1}, one row per sample, full precision.
void write_csv(std::ostream& os, const RegressionDataset& data);

/// 1 - SS_res / SS_tot. Needs equal lengths, at least two samples and
/// non-constant targets.
double r2_score(std::span<const double> pred, std::span<const double> target);

/// R^2 of every column of [n, T] predictions against [n, T] targets.
std::vector<double> r2_per_task(const Array& pred, const Array& target);

}  // namespace ni::fuzzy
