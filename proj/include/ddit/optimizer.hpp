#pragma once

// AdamW with decoupled weight decay, bias correction and linear warmup.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ddit/model.hpp"

namespace ddit {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  std::size_t warmup_iters = 0;
};

// lr * min(1, step / warmup); full lr when warmup is 0.
double warmup_lr(double lr, std::size_t step, std::size_t warmup_iters);

struct AdamState {
  std::uint64_t step = 0;                         // updates applied so far
  std::map<std::string, std::vector<double>> m;   // keyed like ModelParams
  std::map<std::string, std::vector<double>> v;

  static AdamState zeros_like(const ModelParams& params);
  bool operator==(const AdamState&) const = default;
};

// Square root of the sum of squared gradients over every parameter.
double global_grad_norm(const ModelParams& params);
// Rescales all gradients so their global norm is at most max_norm.
// Returns the norm before clipping. max_norm <= 0 leaves gradients alone.
double clip_grad_norm(ModelParams& params, double max_norm);

// One update from the gradients held in each parameter's grad slot.
// Increments state.step first, so the first call uses step 1.
// Throws NumericError naming the parameter if a gradient or result is not finite.
void adamw_update(ModelParams& params, AdamState& state, const AdamWConfig& cfg);

}  // namespace ddit
