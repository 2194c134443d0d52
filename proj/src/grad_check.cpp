#include "ddit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ddit {
namespace {

double evaluate(const LossBuilder& build) {
  Tape tape;
  return build(tape).item();
}

}  // namespace

FdReport finite_difference_check(const LossBuilder& build, std::span<const NamedTensor> params,
                                 const FdOptions& opts) {
  if (!(opts.step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");

  const double f0 = evaluate(build);
  const double f1 = evaluate(build);
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
    throw std::runtime_error("finite_difference_check: loss is not deterministic (" +
                             std::to_string(f0) + " vs " + std::to_string(f1) + ")");
  }

  for (const auto& p : params) p.tensor->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }

  FdReport report;
  for (const auto& p : params) {
    auto values = p.tensor->values();
    const std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    std::size_t stride = 1;
    if (opts.max_entries_per_tensor > 0 && values.size() > opts.max_entries_per_tensor) {
      stride = (values.size() + opts.max_entries_per_tensor - 1) / opts.max_entries_per_tensor;
    }
    double tensor_max = 0.0;
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double saved = values[i];
      values[i] = saved + opts.step;
      const double up = evaluate(build);
      values[i] = saved - opts.step;
      const double down = evaluate(build);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opts.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++report.checked;
      tensor_max = std::max(tensor_max, err);
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = {p.name, i, analytic[i], numeric, err};
      }
    }
    report.per_tensor.emplace_back(p.name, tensor_max);
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

}  // namespace ddit
