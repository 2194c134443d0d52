#pragma once

// Small statistics helpers for the verification checks.

#include <cstddef>
#include <span>
#include <vector>

namespace ddit::stats {

// Regularized upper incomplete gamma Q(a, x).
double gamma_q(double a, double x);
// P(X >= x) for X ~ chi-square with `dof` degrees of freedom.
double chi_square_sf(double x, double dof);

struct ChiSquare {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
  std::size_t merged = 0;   // categories folded into a neighbour for low expectation
};

// Pearson goodness of fit of `observed` counts against `probs`. Categories
// with expected count below `min_expected` are pooled together.
ChiSquare chi_square_test(std::span<const double> observed, std::span<const double> probs,
                          double min_expected = 5.0);

double mean(std::span<const double> xs);
// Unbiased sample variance.
double variance(std::span<const double> xs);

// Binomial(n, p) probability mass for k = 0..n.
std::vector<double> binomial_pmf(std::size_t n, double p);

}  // namespace ddit::stats
