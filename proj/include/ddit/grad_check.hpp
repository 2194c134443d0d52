#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ddit/tensor.hpp"

namespace ddit {

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

struct FdOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Relative errors are measured against max(|analytic|, |numeric|, floor),
  // so entries whose gradient is numerically zero compare absolutely.
  double floor = 1e-6;
  // Check at most this many entries per tensor (evenly strided); 0 = all.
  std::size_t max_entries_per_tensor = 0;
};

struct FdEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FdReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  FdEntry worst;
  std::vector<std::pair<std::string, double>> per_tensor;  // name, max error
  bool passed = false;
};

// Builds the loss on a fresh tape. Must be a pure function of the tensors'
// current values.
using LossBuilder = std::function<Var(Tape&)>;

// Compares tape gradients against central differences
// (f(p+h) - f(p-h)) / 2h for every entry of every listed tensor.
// Throws std::runtime_error if two evaluations at the same point disagree.
FdReport finite_difference_check(const LossBuilder& build, std::span<const NamedTensor> params,
                                 const FdOptions& opts = {});

}  // namespace ddit
