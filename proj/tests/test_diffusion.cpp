#include <cmath>
#include <numbers>

#include "doctest.h"
#include "ddit/image_flow.hpp"
#include "ddit/text_diffusion.hpp"

using namespace ddit;
using doctest::Approx;

namespace {

const Vocab kVocab(3, 2);   // ids 0, 1 and mask 2

std::vector<double> one_hot_rows(const TokenSequence& target, const Vocab& vocab) {
  std::vector<double> p(target.size() * static_cast<std::size_t>(vocab.size), 0.0);
  for (std::size_t j = 0; j < target.size(); ++j) p[j * vocab.size + target.ids[j]] = 1.0;
  return p;
}

}  // namespace

TEST_CASE("linear schedule") {
  CHECK(alpha(0.3) == Approx(0.7));
  CHECK_THROWS_AS(alpha(1.5), std::out_of_range);
  // (alpha_s - alpha_t) / (1 - alpha_t) = (0.8 - 0.4) / 0.6
  CHECK(unmask_probability(0.2, 0.6) == Approx(2.0 / 3.0));
  CHECK(unmask_probability(0.0, 0.6) == Approx(1.0));
  // alpha_s = 0.7, alpha_t = 0.4
  CHECK(unmask_probability(0.3, 0.6) == Approx(0.5));
}

TEST_CASE("antithetic times split (delta, 1] into strata") {
  const auto ts = antithetic_times({4, 0.0}, 0.5);
  REQUIRE(ts.size() == 4);
  CHECK(ts[0] == Approx(0.125));
  CHECK(ts[3] == Approx(0.875));
  const auto one = antithetic_times({1, 0.1}, 0.0);
  CHECK(one[0] == Approx(0.1));
}

TEST_CASE("forward masking at the ends of the interval") {
  TokenSequence x({0, 1, 1, 0}, {1, 0, 0, 0});
  Rng rng(1);
  const auto all = forward_mask(x, kVocab, 1.0, rng);
  CHECK(all.ids == std::vector<int>{0, 2, 2, 2});
  const auto none = forward_mask(x, kVocab, 0.0, rng);
  CHECK(none.ids == x.ids);
}

TEST_CASE("posterior step to s = 0 with an exact predictor recovers the data") {
  TokenSequence clean({1, 0, 1});
  TokenSequence noisy({2, 0, 2});
  Rng rng(2);
  const auto out = posterior_step(noisy, one_hot_rows(clean, kVocab), kVocab, 0.0, 0.7, rng);
  CHECK(out.ids == clean.ids);
}

TEST_CASE("posterior step rejects mass on the mask id") {
  TokenSequence noisy({2});
  const std::vector<double> bad{0.5, 0.0, 0.5};
  Rng rng(2);
  CHECK_THROWS_AS(posterior_step(noisy, bad, kVocab, 0.0, 0.5, rng), DistributionError);
}

TEST_CASE("zero_mask_prob sums to one for arbitrary logits") {
  Rng rng(12);
  const Vocab v(32, 31);
  std::vector<double> logits(32 * 4);
  for (auto& x : logits) x = 10.0 * rng.normal();
  const auto p = zero_mask_prob(logits, v);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 32; ++c) s += p[r * 32 + c];
    CHECK(std::fabs(s - 1.0) < 1e-12);
    CHECK(p[r * 32 + 31] == 0.0);
  }
}

TEST_CASE("zero_mask_prob renormalizes over content ids") {
  const std::vector<double> logits{0.0, 0.0, 50.0};
  const auto p = zero_mask_prob(logits, kVocab);
  CHECK(p[0] == Approx(0.5));
  CHECK(p[1] == Approx(0.5));
  CHECK(p[2] == 0.0);
}

TEST_CASE("nelbo of uniform logits on one masked position") {
  // Two content classes -> -log p = ln 2; weight 1/t = 2.
  Tape tape;
  auto logits = tape.constant(Tensor({2, 3}, std::vector<double>(6, 0.0)));
  TokenSequence clean({1, 0});
  TokenSequence noisy({2, 0});
  const NelboTerm term{logits, &clean, &noisy, 0.5};
  const auto r = nelbo_loss(std::span(&term, 1), kVocab);
  CHECK(r.loss.item() == Approx(2.0 * std::numbers::ln2));
  CHECK(r.token_ce == Approx(std::numbers::ln2));
  CHECK(r.masked == 1);
  CHECK(r.clamped == 0);
}

TEST_CASE("nelbo of a uniform prediction over three content ids at t = 1") {
  const Vocab v4(4, 3);
  Tape tape;
  auto logits = tape.constant(Tensor({3, 4}, std::vector<double>(12, 0.3)));
  TokenSequence clean({0, 2, 1});
  TokenSequence noisy({0, 3, 1});
  const NelboTerm term{logits, &clean, &noisy, 1.0};
  CHECK(nelbo_loss(std::span(&term, 1), v4).loss.item() == Approx(std::log(3.0)));
}

TEST_CASE("nelbo with nothing masked is exactly zero") {
  Tape tape;
  auto logits = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  TokenSequence clean({1, 0});
  const NelboTerm term{logits, &clean, &clean, 0.5};
  CHECK(nelbo_loss(std::span(&term, 1), kVocab).loss.item() == 0.0);
}

TEST_CASE("ancestral sampling with an exact predictor keeps frozen tokens") {
  TokenSequence target({0, 1, 1, 0, 1});
  TokenSequence init({0, 2, 2, 2, 2}, {1, 0, 0, 0, 0});
  auto predictor = [&](const TokenSequence& x) {
    CHECK(x.ids[0] == 0);
    return one_hot_rows(target, kVocab);
  };
  for (std::size_t T : {1, 3, 16}) {
    Rng rng(T);
    CHECK(ancestral_sample(predictor, init, kVocab, T, rng).ids == target.ids);
  }
}

TEST_CASE("flow interpolant and target") {
  const GridShape g{1, 1, 1};
  ImageGrid x(g, 1.0), eps(g, -1.0);
  CHECK(interpolate(x, eps, 0.25).values[0] == Approx(0.5));
  CHECK(velocity_target(x, eps).values[0] == Approx(-2.0));
  CHECK(fm_loss(velocity_target(x, eps), x, eps) == 0.0);
  CHECK(fm_loss(ImageGrid(g, 0.0), x, eps) == Approx(4.0));
}

TEST_CASE("logistic-normal timesteps") {
  CHECK(logistic_timestep(0.0) == Approx(0.5));
  CHECK(logistic_timestep(100.0) == Approx(1.0 - 1e-5));
  CHECK(logistic_timestep(-100.0) == Approx(1e-5));
}

TEST_CASE("sampled timesteps are symmetric about one half") {
  Rng rng(21);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double t = sample_timestep(rng);
    REQUIRE(t > 0.0);
    REQUIRE(t < 1.0);
    sum += t;
  }
  CHECK(sum / n > 0.49);
  CHECK(sum / n < 0.51);
}

TEST_CASE("guided velocity combination") {
  const GridShape g{1, 1, 2};
  ImageGrid c(g, std::vector<double>{1.0, 2.0}), u(g, std::vector<double>{3.0, -1.0});
  CHECK(cfg_velocity(c, u, 1.0) == c);
  CHECK(cfg_velocity(ImageGrid(g, 1.0), ImageGrid(g, 0.0), 2.0) == ImageGrid(g, 2.0));
  const auto v = cfg_velocity(c, u, 7.0);
  CHECK(v.values[0] == Approx(7.0 - 18.0));
  CHECK(v.values[1] == Approx(14.0 + 6.0));
}

TEST_CASE("Euler steps on v = x shrink geometrically") {
  // x <- x - (1/T) x per step, so x_0 = (1 - 1/T)^T x_1.
  const GridShape g{1, 1, 1};
  VelocityFn v = [](const ImageGrid& x, double, const TokenSequence&) { return x; };
  GuidanceConfig off;
  off.enabled = false;
  const auto out = euler_integrate(v, TokenSequence({0}), ImageGrid(g, 1.0), 4, off);
  CHECK(out.values[0] == Approx(0.31640625));
}

TEST_CASE("Euler error on v = -x halves when T doubles") {
  // Integrating from t = 1 to 0 with x <- x + x / T; exact answer e * x_1.
  const GridShape g{1, 1, 1};
  VelocityFn v = [](const ImageGrid& x, double, const TokenSequence&) {
    ImageGrid out = x;
    for (auto& e : out.values) e = -e;
    return out;
  };
  GuidanceConfig off;
  off.enabled = false;
  auto err = [&](std::size_t T) {
    return std::fabs(euler_integrate(v, TokenSequence({0}), ImageGrid(g, 1.0), T, off).values[0] - std::exp(1.0));
  };
  const double ratio = err(32) / err(64);
  CHECK(ratio > 2.0 * 0.8);
  CHECK(ratio < 2.0 * 1.2);
}
