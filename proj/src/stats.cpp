#include "ddit/stats.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace ddit::stats {

double gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw std::domain_error("gamma_q: need a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  const double log_prefix = a * std::log(x) - x - std::lgamma(a);
  if (x < a + 1.0) {
    // Series for P(a, x).
    double term = 1.0 / a, sum = term, ap = a;
    for (int n = 0; n < 10000; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
    }
    return 1.0 - sum * std::exp(log_prefix);
  }
  // Lentz continued fraction for Q(a, x).
  const double tiny = std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon();
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(log_prefix) * h;
}

double chi_square_sf(double x, double dof) { return gamma_q(dof / 2.0, x / 2.0); }

ChiSquare chi_square_test(std::span<const double> observed, std::span<const double> probs, double min_expected) {
  if (observed.size() != probs.size() || observed.empty()) {
    throw std::invalid_argument("chi_square_test: observed and probs differ in size");
  }
  double total = 0.0;
  for (double o : observed) total += o;
  ChiSquare r;
  double pool_o = 0.0, pool_e = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = probs[i] * total;
    if (e < min_expected) {
      pool_o += observed[i];
      pool_e += e;
      ++r.merged;
      continue;
    }
    r.statistic += (observed[i] - e) * (observed[i] - e) / e;
    ++cells;
  }
  if (pool_e > 0.0) {
    r.statistic += (pool_o - pool_e) * (pool_o - pool_e) / pool_e;
    ++cells;
  } else if (pool_o > 0.0) {
    // Mass observed where none is possible.
    r.statistic = std::numeric_limits<double>::infinity();
  }
  r.dof = cells > 1 ? static_cast<double>(cells - 1) : 1.0;
  r.p_value = std::isinf(r.statistic) ? 0.0 : chi_square_sf(r.statistic, r.dof);
  return r;
}

double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - mu) * (x - mu);
  return ss / static_cast<double>(xs.size() - 1);
}

std::vector<double> binomial_pmf(std::size_t n, double p) {
  std::vector<double> out(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const double logc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    out[k] = std::exp(logc + k * std::log(p) + (n - k) * std::log1p(-p));
  }
  return out;
}

}  // namespace ddit::stats
