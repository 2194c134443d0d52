#include "ddit/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace ddit {

double warmup_lr(double lr, std::size_t step, std::size_t warmup_iters) {
  if (warmup_iters == 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_iters));
}

AdamState AdamState::zeros_like(const ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.tensors()) {
    s.m[name].assign(t.size(), 0.0);
    s.v[name].assign(t.size(), 0.0);
  }
  return s;
}

double global_grad_norm(const ModelParams& params) {
  double sq = 0.0;
  for (const auto& [_, t] : params.tensors()) {
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(ModelParams& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [_, t] : params.tensors()) {
      for (double& g : t.grad()) g *= f;
    }
  }
  return norm;
}

void adamw_update(ModelParams& params, AdamState& state, const AdamWConfig& cfg) {
  state.step += 1;
  const double lr = warmup_lr(cfg.lr, state.step, cfg.warmup_iters);
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params.tensors()) {
    auto mit = state.m.find(name);
    auto vit = state.v.find(name);
    if (mit == state.m.end() || vit == state.v.end() || mit->second.size() != p.size()) {
      throw std::logic_error("adamw: optimizer state does not match parameter '" + name + "'");
    }
    auto& m = mit->second;
    auto& v = vit->second;
    auto w = p.values();
    const bool has_grad = p.has_grad();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * cfg.weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (!std::isfinite(w[i])) {
        throw NumericError("adamw: parameter '" + name + "' became non-finite at index " + std::to_string(i));
      }
    }
  }
}

}  // namespace ddit
