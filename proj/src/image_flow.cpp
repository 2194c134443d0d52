#include "ddit/image_flow.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "ddit/fault.hpp"

namespace ddit {
namespace {

void same_shape(const ImageGrid& a, const ImageGrid& b, const char* op) {
  if (!(a.shape == b.shape) || a.values.size() != b.values.size()) {
    throw ShapeError(std::string(op) + ": grid shapes differ");
  }
}

}  // namespace

ImageGrid::ImageGrid(GridShape s, std::vector<double> v) : shape(s), values(std::move(v)) {
  if (values.size() != shape.size()) throw ShapeError("ImageGrid: value count does not match shape");
}

ImageGrid standard_normal_grid(GridShape shape, Rng& rng) {
  ImageGrid g(shape);
  for (auto& v : g.values) v = rng.normal();
  return g;
}

ImageGrid interpolate(const ImageGrid& x, const ImageGrid& noise, double t) {
  same_shape(x, noise, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("interpolate: t outside [0, 1]");
  ImageGrid out(x.shape);
  for (std::size_t i = 0; i < x.values.size(); ++i) {
    out.values[i] = (1.0 - t) * x.values[i] + t * noise.values[i];
  }
  return out;
}

ImageGrid velocity_target(const ImageGrid& x, const ImageGrid& noise) {
  same_shape(x, noise, "velocity_target");
  ImageGrid out(x.shape);
  for (std::size_t i = 0; i < x.values.size(); ++i) out.values[i] = noise.values[i] - x.values[i];
  return out;
}

double fm_loss(const ImageGrid& pred, const ImageGrid& x, const ImageGrid& noise) {
  same_shape(pred, x, "fm_loss");
  same_shape(x, noise, "fm_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double d = pred.values[i] - (noise.values[i] - x.values[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.values.size());
}

Var fm_loss(Var pred, std::span<const double> target) {
  if (numel(pred.shape()) != target.size()) throw ShapeError("fm_loss: prediction and target sizes differ");
  Var tgt = pred.tape()->constant(Tensor(pred.shape(), {target.begin(), target.end()}));
  return scale(sum_of_squares(subtract(pred, tgt)), 1.0 / static_cast<double>(target.size()));
}

double logistic_timestep(double n) {
  const double t = 1.0 / (1.0 + std::exp(-n));
  return std::clamp(t, 1e-5, 1.0 - 1e-5);
}

double sample_timestep(Rng& rng) { return logistic_timestep(rng.normal()); }

ImageGrid cfg_velocity(const ImageGrid& v_cond, const ImageGrid& v_uncond, double s) {
  same_shape(v_cond, v_uncond, "cfg_velocity");
  if (!(s >= 0.0)) throw std::invalid_argument("cfg_velocity: guidance scale must be >= 0");
  ImageGrid out(v_cond.shape);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = s * v_cond.values[i] + (1.0 - s) * v_uncond.values[i];
  }
  return out;
}

ImageGrid euler_integrate(const VelocityFn& velocity, const TokenSequence& text_cond, ImageGrid x,
                          std::size_t steps, const GuidanceConfig& guidance) {
  if (steps == 0) throw std::invalid_argument("euler_sample: need at least one step");
  const bool two_branch = guidance.enabled && guidance.scale != 1.0;
  const double dt = 1.0 / static_cast<double>(steps);
  const double sign = fault::enabled(fault::Fault::euler_sign_flip) ? 1.0 : -1.0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
    ImageGrid v = velocity(x, t, text_cond);
    if (two_branch) v = cfg_velocity(v, velocity(x, t, guidance.null_text), guidance.scale);
    same_shape(x, v, "euler_sample");
    for (std::size_t i = 0; i < x.values.size(); ++i) {
      x.values[i] += sign * dt * v.values[i];
      if (!std::isfinite(x.values[i])) {
        throw NumericError("euler_sample: non-finite state at step " + std::to_string(k));
      }
    }
  }
  return x;
}

ImageGrid euler_sample(const VelocityFn& velocity, const TokenSequence& text_cond, GridShape shape,
                       std::size_t steps, const GuidanceConfig& guidance, Rng& rng) {
  return euler_integrate(velocity, text_cond, standard_normal_grid(shape, rng), steps, guidance);
}

}  // namespace ddit
