#include <cmath>

#include "doctest.h"
#include "ddit/model.hpp"
#include "ddit/verify.hpp"

using namespace ddit;

namespace {

std::vector<double> encode_values(ModelParams& p, const DDiTConfig& cfg, const TokenSequence& x) {
  Tape tape;
  const auto v = text_encode(tape, p, cfg, x).value();
  return {v.begin(), v.end()};
}

TokenSequence random_tokens(const DDiTConfig& cfg, Rng& rng) {
  std::vector<int> ids(cfg.text_len);
  for (auto& id : ids) id = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab - 1)));
  return TokenSequence(std::move(ids));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("patchify and unpatchify are inverse") {
  const auto cfg = verify::reference_config();
  Rng rng(1);
  const auto img = standard_normal_grid(cfg.image, rng);
  const auto tokens = patchify(img, cfg.patch);
  CHECK(tokens.size() == cfg.image_tokens() * cfg.patch_dim());
  CHECK(unpatchify(tokens, cfg.image, cfg.patch) == img);
}

TEST_CASE("timestep embedding layout") {
  // cos half then sin half; at t = 0 that is ones then zeros.
  const auto e = timestep_embedding(0.0, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(e[i] == 1.0);
    CHECK(e[4 + i] == 0.0);
  }
}

TEST_CASE("changing one token changes the encoding at every position") {
  const auto cfg = verify::reference_config();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto p = ModelParams::init(cfg, rng);
    auto a = random_tokens(cfg, rng);
    auto b = a;
    b.ids[2] = (b.ids[2] + 1) % (cfg.vocab - 1);
    const auto ea = encode_values(p, cfg, a), eb = encode_values(p, cfg, b);
    const std::size_t w = cfg.width;
    for (std::size_t j = 0; j < cfg.text_len; ++j) {
      const std::span<const double> ra(ea.data() + j * w, w), rb(eb.data() + j * w, w);
      CHECK(max_abs_diff(ra, rb) > 0.0);
    }
  }
}

TEST_CASE("joint attention couples the two streams") {
  const auto cfg = verify::reference_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    // Dense init: the standard init zeroes the velocity head.
    auto p = ModelParams::init(cfg, rng, InitMode::dense);
    const auto img = standard_normal_grid(cfg.image, rng);
    const auto text = random_tokens(cfg, rng);
    const auto base = predict(p, cfg, img, text, 0.4);
    const auto no_text = predict(p, cfg, img, TokenSequence(std::vector<int>(cfg.text_len, 0)), 0.4);
    const auto no_image = predict(p, cfg, ImageGrid(cfg.image, 0.0), text, 0.4);
    CHECK(max_abs_diff(base.velocity.values, no_text.velocity.values) > 0.0);
    CHECK(max_abs_diff(base.text_logits, no_image.text_logits) > 0.0);
  }
}

TEST_CASE("stacked batch equals separate forwards") {
  const auto cfg = verify::reference_config();
  Rng rng(8);
  auto p = ModelParams::init(cfg, rng, InitMode::dense);
  std::vector<ImageGrid> imgs;
  std::vector<TokenSequence> texts;
  for (int i = 0; i < 3; ++i) {
    imgs.push_back(standard_normal_grid(cfg.image, rng));
    texts.push_back(random_tokens(cfg, rng));
  }
  std::vector<BatchItem> items;
  for (int i = 0; i < 3; ++i) items.push_back({&imgs[i], &texts[i], 0.2 + 0.3 * i});
  const auto batched = predict_batch(p, cfg, items);
  for (int i = 0; i < 3; ++i) {
    const auto one = predict(p, cfg, imgs[i], texts[i], 0.2 + 0.3 * i);
    CHECK(max_abs_diff(one.velocity.values, batched[i].velocity.values) < 1e-12);
    CHECK(max_abs_diff(one.text_logits, batched[i].text_logits) < 1e-12);
  }
}
