#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ddit/binary_io.hpp"
#include "ddit/checkpoint.hpp"
#include "ddit/config.hpp"
#include "ddit/dataset_io.hpp"
#include "ddit/evaluation.hpp"
#include "ddit/optimizer.hpp"
#include "ddit/ppm.hpp"
#include "ddit/stats.hpp"
#include "ddit/trainer.hpp"
#include "ddit/verify.hpp"

using namespace ddit;
using doctest::Approx;

namespace {

ModelParams single(const std::string& name, std::vector<double> values, std::vector<double> grads) {
  ModelParams p;
  const auto n = values.size();
  Tensor t({n}, std::move(values));
  t.ensure_grad();
  std::copy(grads.begin(), grads.end(), t.grad().begin());
  p.add(name, std::move(t));
  return p;
}

}  // namespace

TEST_CASE("config text round trip") {
  RunConfig c;
  c.set("train.lr=0.01");
  c.set("model.depth", "2");
  c.set("sample.guidance=3.5");
  const auto back = RunConfig::parse(c.to_text());
  CHECK(back == c);
  CHECK(back.train.lr == 0.01);
  CHECK(back.model.depth == 2);
}

TEST_CASE("config errors name the offending key") {
  try {
    RunConfig::parse("version = 1\n[train]\nlearning_rate = 0.1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::parse("version = 2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("version = 1\n[train]\nlr = fast\n"), ConfigError);
  RunConfig c;
  CHECK_THROWS_AS(c.set("model.colour=1"), ConfigError);
}

TEST_CASE("training hash ignores sampler and schedule-length settings") {
  RunConfig a, b;
  b.sample.guidance = 2.0;
  b.train.steps = 5;
  b.train.eval_every = 7;
  CHECK(a.training_hash() == b.training_hash());
  b.train.lr = 1e-3;
  CHECK(a.training_hash() != b.training_hash());
}

TEST_CASE("warmup multiplier") {
  CHECK(warmup_lr(1.0, 5, 10) == Approx(0.5));
  CHECK(warmup_lr(1.0, 10, 10) == 1.0);
  CHECK(warmup_lr(1.0, 50, 10) == 1.0);
  CHECK(warmup_lr(2.0, 1, 0) == 2.0);
}

TEST_CASE("first AdamW step moves by lr after decoupled decay") {
  // Bias-corrected first step: m_hat = g, v_hat = g^2, so the Adam term is
  // lr * g / (|g| + eps). Decay applies first: p <- p - lr * wd * p.
  auto p = single("w", {1.0}, {1.0});
  auto st = AdamState::zeros_like(p);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  adamw_update(p, st, cfg);
  CHECK(st.step == 1);
  CHECK(p.at("w")[0] == Approx(1.0 - 0.001 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("AdamW rejects non-finite gradients by name") {
  auto p = single("blk.0.w", {1.0}, {NAN});
  auto st = AdamState::zeros_like(p);
  try {
    adamw_update(p, st, AdamWConfig{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("blk.0.w") != std::string::npos);
  }
}

TEST_CASE("global-norm clipping") {
  auto p = single("w", {0.0, 0.0}, {3.0, 4.0});
  CHECK(clip_grad_norm(p, 1.0) == Approx(5.0));
  CHECK(p.at("w").grad()[0] == Approx(0.6));
  CHECK(p.at("w").grad()[1] == Approx(0.8));
  CHECK(clip_grad_norm(p, 10.0) == Approx(1.0));
  CHECK(p.at("w").grad()[1] == Approx(0.8));
}

TEST_CASE("parameter count matches the closed form") {
  Rng rng(1);
  DDiTConfig cfg;
  CHECK(ModelParams::init(cfg, rng).count() == param_count(cfg));
  CHECK(param_count(cfg) == 2460880);
  CHECK(param_count(verify::reference_config()) == 11288);
}

TEST_CASE("ppm encoding of extreme and middle values") {
  // (v + 1) * 127.5 rounded: -1 -> 0, 0 -> 128, 1 -> 255; clamped outside.
  ImageGrid img(GridShape{1, 2, 3}, std::vector<double>{-1, 0, 1, 5, -5, 0.5});
  const auto bytes = encode_ppm(img);
  const std::string header = "P6\n2 1\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
  const std::vector<std::uint8_t> px(bytes.begin() + header.size(), bytes.end());
  CHECK(px == std::vector<std::uint8_t>{0, 128, 255, 255, 0, 191});
  const auto back = decode_ppm(bytes);
  CHECK(back.values[2] == 1.0);
  CHECK(back.values[0] == -1.0);
}

TEST_CASE("dataset bytes are a function of the seed") {
  const auto a = generate_dataset(20, 7);
  const auto b = generate_dataset(20, 7);
  const auto bytes = encode_dataset(a);
  CHECK(bytes == encode_dataset(b));
  CHECK(a.fingerprint() != generate_dataset(20, 8).fingerprint());
  const auto back = decode_dataset(bytes);
  CHECK(back.examples.size() == 20);
  CHECK(back.examples[3].image == a.examples[3].image);
  CHECK(encode_dataset(back) == bytes);
}

TEST_CASE("checkpoint corruption is detected") {
  const auto cfg = verify::tiny_world_config();
  const auto st = TrainState::fresh(cfg);
  auto bytes = encode_checkpoint(st.to_checkpoint(cfg, 42));
  const auto back = decode_checkpoint(bytes);
  for (const auto& [name, t] : st.params.tensors()) {
    const auto v = back.params.at(name).values();
    CHECK(std::equal(v.begin(), v.end(), t.values().begin(), t.values().end()));
  }
  bytes[bytes.size() / 2] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
}

TEST_CASE("held-out examples differ from the training stream") {
  const auto train = generate_dataset(50, 3);
  const auto held = held_out_examples(50, 3);
  std::size_t same = 0;
  for (std::size_t i = 0; i < 50; ++i) same += train.examples[i].image == held[i].image;
  CHECK(same < 5);
}

TEST_CASE("chi-square tail probabilities") {
  // 99th percentiles: 6.635 at 1 dof, 9.210 at 2 dof.
  CHECK(stats::chi_square_sf(6.6349, 1) == Approx(0.01).epsilon(1e-3));
  CHECK(stats::chi_square_sf(9.2103, 2) == Approx(0.01).epsilon(1e-3));
  // 2 dof is exponential with mean 2.
  CHECK(stats::chi_square_sf(3.0, 2) == Approx(std::exp(-1.5)));
}

TEST_CASE("an untrained model answers at chance") {
  // Near-uniform logits over 31 content ids: each answer is right with
  // probability 1/31. Three-sigma binomial band on the question count.
  const auto cfg = verify::tiny_world_config();
  Rng rng(17);
  auto params = ModelParams::init(cfg.model, rng);
  const auto held = held_out_examples(100, 5);
  EvalSettings es;
  es.images = false;
  es.answer_steps = 4;
  es.caption_steps = 4;
  const auto m = evaluate(params, cfg.model, held, es);
  const double n = m.at("vqa.n");
  const double p = 1.0 / 31.0;
  const double sd = std::sqrt(n * p * (1 - p));
  CHECK(m.at("vqa.accuracy") * n > n * p - 3 * sd);
  CHECK(m.at("vqa.accuracy") * n < n * p + 3 * sd);
  CHECK(m.at("caption.attribute") < 0.05);
}
