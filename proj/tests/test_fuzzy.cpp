#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ni/fuzzy.hpp"

using namespace ni;
using namespace ni::fuzzy;

TEST_CASE("primitives reduce to Boolean logic on corners") {
  for (int a = 0; a <= 1; ++a) {
    CHECK(fuzzy_not(a) == static_cast<double>(!a));
    for (int b = 0; b <= 1; ++b) {
      CHECK(fuzzy_and(a, b) == static_cast<double>(a && b));
      CHECK(fuzzy_or(a, b) == static_cast<double>(a || b));
    }
  }
  CHECK(fuzzy_and(0.5, 0.5) == 0.25);
  CHECK(fuzzy_or(0.5, 0.5) == 0.75);
  CHECK_THROWS_AS(fuzzy_and(1.5, 0.2), std::domain_error);
  CHECK_THROWS_AS(fuzzy_not(-0.1), std::domain_error);
  CHECK_THROWS_AS(fuzzy_or(0.2, std::nan("")), std::domain_error);
}

TEST_CASE("de Morgan holds on random pairs") {
  Rng rng(1);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double a = uniform01(rng);
    const double b = uniform01(rng);
    worst = std::max(worst, std::abs(fuzzy_or(a, b) - fuzzy_not(fuzzy_and(fuzzy_not(a), fuzzy_not(b)))));
  }
  CHECK(worst <= 1e-15);
}

TEST_CASE("and / or are monotone in each argument") {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const double a = uniform01(rng), b = uniform01(rng), c = uniform01(rng);
    const double lo = std::min(a, b), hi = std::max(a, b);
    CHECK(fuzzy_and(lo, c) <= fuzzy_and(hi, c));
    CHECK(fuzzy_or(lo, c) <= fuzzy_or(hi, c));
  }
}

TEST_CASE("truth tables: determinism, Bernoulli mean, N=1 family") {
  Rng a(7), b(7);
  CHECK(sample_truth_table(5, a) == sample_truth_table(5, b));

  Rng rng(3);
  double ones = 0.0;
  for (int i = 0; i < 1000; ++i) {
    for (auto bit : sample_truth_table(5, rng).truth_table) ones += bit;
  }
  CHECK(std::abs(ones / (1000.0 * 32.0) - 0.5) < 0.05);

  std::set<std::string> seen;
  for (int i = 0; i < 200; ++i) seen.insert(sample_truth_table(1, rng).to_hex());
  CHECK(seen.size() == 4);
}

TEST_CASE("hex encoding round-trips and packs MSB first") {
  FuzzyExpr x{2, {0, 1, 1, 0}};
  CHECK(x.to_hex() == "6");
  CHECK(FuzzyExpr{1, {1, 0}}.to_hex() == "8");
  Rng rng(4);
  for (std::size_t n = 1; n <= 6; ++n) {
    FuzzyExpr e = sample_truth_table(n, rng);
    CHECK(FuzzyExpr::from_hex(n, e.to_hex()) == e);
  }
  CHECK_THROWS(FuzzyExpr::from_hex(2, "66"));
  CHECK_THROWS(FuzzyExpr::from_hex(1, "9"));
  CHECK_THROWS(FuzzyExpr::from_hex(2, "g"));
}

TEST_CASE("eval_fuzzy: XOR by hand, constant tables, dimension check") {
  FuzzyExpr x{2, {0, 1, 1, 0}};
  CHECK(x.minterms() == std::vector<std::size_t>{1, 2});
  const double half[] = {0.5, 0.5};
  CHECK(eval_fuzzy(x, half) == 0.4375);
  FuzzyExpr zero{3, std::vector<std::uint8_t>(8, 0)};
  FuzzyExpr one{3, std::vector<std::uint8_t>(8, 1)};
  const double p[] = {0.3, 0.9, 0.1};
  CHECK(eval_fuzzy(zero, p) == 0.0);
  for (std::size_t i = 0; i < 8; ++i) {
    const double c[] = {double(i >> 2 & 1), double(i >> 1 & 1), double(i & 1)};
    CHECK(eval_fuzzy(one, c) == 1.0);
  }
  const double wrong[] = {0.5};
  CHECK_THROWS_AS(eval_fuzzy(x, wrong), std::invalid_argument);
}

TEST_CASE("DNF is sound at every corner") {
  Rng rng(5);
  for (std::size_t n = 1; n <= 5; ++n) {
    for (int rep = 0; rep < 100; ++rep) {
      FuzzyExpr e = sample_truth_table(n, rng);
      for (std::size_t i = 0; i < (std::size_t{1} << n); ++i) {
        std::vector<double> c(n);
        for (std::size_t k = 0; k < n; ++k) c[k] = static_cast<double>((i >> (n - 1 - k)) & 1u);
        REQUIRE(eval_fuzzy(e, c) == static_cast<double>(e.truth_table[i]));
      }
    }
  }
}

TEST_CASE("datasets: shape, range, determinism, split") {
  Rng rng(6);
  std::vector<FuzzyExpr> exprs;
  for (int i = 0; i < 3; ++i) exprs.push_back(sample_truth_table(5, rng));
  RegressionDataset d = gen_dataset(exprs, 1000, 11);
  CHECK(d.inputs.shape() == Shape{1000, 5});
  CHECK(d.targets.shape() == Shape{1000, 3});
  for (double v : d.inputs.values()) CHECK((v >= 0.0 && v < 1.0));
  for (double v : d.targets.values()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(d.train.size() == 800);
  CHECK(d.validation.size() == 200);
  std::set<std::size_t> all(d.train.begin(), d.train.end());
  all.insert(d.validation.begin(), d.validation.end());
  CHECK(all.size() == 1000);

  RegressionDataset again = gen_dataset(exprs, 1000, 11);
  CHECK(again.inputs == d.inputs);
  CHECK(again.targets == d.targets);
  CHECK(again.train == d.train);
  CHECK(gen_dataset(exprs, 1000, 12).inputs != d.inputs);

  CHECK_THROWS_AS(gen_dataset(exprs, 9, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_dataset({}, 100, 1), std::invalid_argument);

  Array rows = take_rows(d.targets, std::span(d.validation).first(2));
  CHECK(rows[0] == d.targets[d.validation[0] * 3]);
}

TEST_CASE("paper-scale dataset shape") {
  Rng rng(8);
  std::vector<FuzzyExpr> exprs;
  for (int i = 0; i < 20; ++i) exprs.push_back(sample_truth_table(5, rng));
  RegressionDataset d = gen_dataset(exprs, 163840, 1);
  CHECK(d.targets.shape() == Shape{163840, 20});
}

TEST_CASE("CSV export has the documented header") {
  Rng rng(9);
  RegressionDataset d = gen_dataset({sample_truth_table(2, rng), sample_truth_table(2, rng)}, 10, 3);
  std::ostringstream os;
  write_csv(os, d);
  const std::string s = os.str();
  CHECK(s.substr(0, s.find('\n')) == "x0,x1,f0,f1");
  CHECK(std::count(s.begin(), s.end(), '\n') == 11);
}

TEST_CASE("r2 score") {
  const double y[] = {1.0, 2.0, 4.0};
  const double m[] = {7.0 / 3, 7.0 / 3, 7.0 / 3};
  CHECK(r2_score(y, y) == 1.0);
  CHECK(r2_score(m, y) == doctest::Approx(0.0));
  const double c[] = {2.0, 2.0, 2.0};
  CHECK_THROWS_AS(r2_score(y, c), std::invalid_argument);
  const double one[] = {1.0};
  CHECK_THROWS_AS(r2_score(one, one), std::invalid_argument);
  CHECK_THROWS_AS(r2_score(std::span(y).first(2), y), std::invalid_argument);
}
