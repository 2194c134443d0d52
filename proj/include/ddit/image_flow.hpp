#pragma once

// Rectified-flow image diffusion: x_t = (1 - t) x + t eps, target velocity
// eps - x, sampled by integrating the velocity field from t = 1 to t = 0.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ddit/rng.hpp"
#include "ddit/tensor.hpp"
#include "ddit/text_diffusion.hpp"

namespace ddit {

struct GridShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const { return height * width * channels; }
  bool operator==(const GridShape&) const = default;
};

// H x W x C values, row-major with channels innermost.
struct ImageGrid {
  GridShape shape;
  std::vector<double> values;

  ImageGrid() = default;
  explicit ImageGrid(GridShape s, double fill = 0.0) : shape(s), values(s.size(), fill) {}
  ImageGrid(GridShape s, std::vector<double> v);

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return values[(y * shape.width + x) * shape.channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return values[(y * shape.width + x) * shape.channels + c];
  }

  bool operator==(const ImageGrid&) const = default;
};

ImageGrid standard_normal_grid(GridShape shape, Rng& rng);

// (1 - t) x + t noise.
ImageGrid interpolate(const ImageGrid& x, const ImageGrid& noise, double t);
// noise - x.
ImageGrid velocity_target(const ImageGrid& x, const ImageGrid& noise);
// Mean squared error between pred and noise - x over all elements.
double fm_loss(const ImageGrid& pred, const ImageGrid& x, const ImageGrid& noise);
// Tape form: mean((pred - target)^2) over all elements of `pred`.
Var fm_loss(Var pred, std::span<const double> target);

// logistic(n) for n ~ N(0, 1), clipped to [1e-5, 1 - 1e-5].
double sample_timestep(Rng& rng);
double logistic_timestep(double n);

// s * v_cond + (1 - s) * v_uncond.
ImageGrid cfg_velocity(const ImageGrid& v_cond, const ImageGrid& v_uncond, double s);

struct GuidanceConfig {
  double scale = 7.0;
  TokenSequence null_text;
  bool enabled = true;
};

using VelocityFn = std::function<ImageGrid(const ImageGrid& x, double t, const TokenSequence& cond)>;

// Starts from x ~ N(0, I) and applies x <- x - dt * v~(x, t) on the grid
// t_k = 1 - k/T. The unconditional branch is evaluated only when guidance is
// enabled and scale != 1.
ImageGrid euler_sample(const VelocityFn& velocity, const TokenSequence& text_cond, GridShape shape,
                       std::size_t steps, const GuidanceConfig& guidance, Rng& rng);

// Same integration from a given initial state.
ImageGrid euler_integrate(const VelocityFn& velocity, const TokenSequence& text_cond, ImageGrid x,
                          std::size_t steps, const GuidanceConfig& guidance);

}  // namespace ddit
