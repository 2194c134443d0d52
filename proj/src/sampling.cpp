#include "ddit/sampling.hpp"

#include "ddit/world.hpp"

namespace ddit {

VelocityFn model_velocity(ModelParams& params, const DDiTConfig& cfg) {
  return [&params, &cfg](const ImageGrid& x, double t, const TokenSequence& cond) {
    return predict(params, cfg, x, cond, t).velocity;
  };
}

ImageGrid sample_image(ModelParams& params, const DDiTConfig& cfg, const TokenSequence& caption,
                       const ImageSampling& opts, Rng& rng) {
  if (caption.count(cfg.vocabulary().mask_id) != 0) {
    throw std::invalid_argument("sample_image: caption contains mask tokens");
  }
  GuidanceConfig g;
  g.scale = opts.guidance;
  g.enabled = opts.guidance_enabled;
  g.null_text = world::null_caption(cfg.text_len);
  return euler_sample(model_velocity(params, cfg), caption, cfg.image, opts.steps, g, rng);
}

TokenPredictor model_predictor(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& image,
                               InputTrace trace) {
  return [&params, &cfg, &image, trace = std::move(trace)](const TokenSequence& text) {
    if (trace) trace(text);
    const auto out = predict(params, cfg, image, text, 0.0);
    return zero_mask_prob(out.text_logits, cfg.vocabulary());
  };
}

TokenSequence sample_caption(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& image,
                             std::size_t steps, Rng& rng, InputTrace trace) {
  const Vocab vocab = cfg.vocabulary();
  const TokenSequence init(std::vector<int>(cfg.text_len, vocab.mask_id));
  return ancestral_sample(model_predictor(params, cfg, image, std::move(trace)), init, vocab, steps, rng);
}

TokenSequence sample_answer(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& image,
                            std::span<const int> question, std::size_t steps, Rng& rng, InputTrace trace) {
  if (question.size() >= cfg.text_len) {
    throw std::invalid_argument("sample_answer: question leaves no room for an answer");
  }
  const Vocab vocab = cfg.vocabulary();
  std::vector<int> ids(cfg.text_len, vocab.mask_id);
  std::vector<std::uint8_t> frozen(cfg.text_len, 0);
  for (std::size_t j = 0; j < question.size(); ++j) {
    ids[j] = question[j];
    frozen[j] = 1;
  }
  const TokenSequence init(std::move(ids), std::move(frozen));
  return ancestral_sample(model_predictor(params, cfg, image, std::move(trace)), init, vocab, steps, rng);
}

}  // namespace ddit
