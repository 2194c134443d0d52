#pragma once

// The three inference modes of a trained model: text-to-image by Euler
// integration of the velocity field with classifier-free guidance,
// captioning by ancestral unmasking from an all-mask sequence, and question
// answering by infilling with the question kept frozen.

#include <functional>
#include <span>

#include "ddit/image_flow.hpp"
#include "ddit/model.hpp"
#include "ddit/rng.hpp"
#include "ddit/text_diffusion.hpp"

namespace ddit {

// Receives the text input of every model evaluation, in order.
using InputTrace = std::function<void(const TokenSequence&)>;

struct ImageSampling {
  std::size_t steps = 28;
  double guidance = 7.0;
  bool guidance_enabled = true;
};

// Image velocity of the model at (x, t) given a caption.
VelocityFn model_velocity(ModelParams& params, const DDiTConfig& cfg);

ImageGrid sample_image(ModelParams& params, const DDiTConfig& cfg, const TokenSequence& caption,
                       const ImageSampling& opts, Rng& rng);

// Token probabilities predicted for `text` given a clean image (t = 0),
// with zero mass on the mask id.
TokenPredictor model_predictor(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& image,
                               InputTrace trace = {});

TokenSequence sample_caption(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& image,
                             std::size_t steps, Rng& rng, InputTrace trace = {});

// Fills every position after the question. The question tokens are frozen.
TokenSequence sample_answer(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& image,
                            std::span<const int> question, std::size_t steps, Rng& rng, InputTrace trace = {});

}  // namespace ddit
