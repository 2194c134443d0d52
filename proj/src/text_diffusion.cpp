#include "ddit/text_diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ddit/fault.hpp"

namespace ddit {
namespace {

void check_distribution_row(std::span<const double> row, const Vocab& vocab, std::size_t pos) {
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0)) throw DistributionError("position " + std::to_string(pos) + ": negative or NaN probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw DistributionError("position " + std::to_string(pos) + ": probabilities sum to " +
                            std::to_string(sum));
  }
  if (row[static_cast<std::size_t>(vocab.mask_id)] != 0.0) {
    throw DistributionError("position " + std::to_string(pos) + ": nonzero mass on the mask id");
  }
}

int draw_categorical(std::span<const double> row, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last_positive = -1;
  for (std::size_t k = 0; k < row.size(); ++k) {
    if (row[k] <= 0.0) continue;
    acc += row[k];
    last_positive = static_cast<int>(k);
    if (u < acc) return last_positive;
  }
  // Rounding left u above the accumulated mass.
  return last_positive;
}

}  // namespace

Vocab::Vocab(int size_, int mask_id_) : size(size_), mask_id(mask_id_) {
  if (size < 3) throw std::invalid_argument("Vocab: need at least two content tokens plus the mask");
  if (mask_id < 0 || mask_id >= size) throw std::invalid_argument("Vocab: mask id outside [0, size)");
}

TokenSequence::TokenSequence(std::vector<int> ids_) : ids(std::move(ids_)), frozen(ids.size(), 0) {}

TokenSequence::TokenSequence(std::vector<int> ids_, std::vector<std::uint8_t> frozen_)
    : ids(std::move(ids_)), frozen(std::move(frozen_)) {
  if (frozen.size() != ids.size()) throw std::invalid_argument("TokenSequence: frozen mask length differs");
}

std::size_t TokenSequence::count(int id) const {
  return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), id));
}

double alpha(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("alpha: t=" + std::to_string(t) + " outside [0, 1]");
  return 1.0 - t;
}

TokenSequence forward_mask(const TokenSequence& x, const Vocab& vocab, double t, Rng& rng) {
  const double keep = alpha(t);
  TokenSequence out = x;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x.is_frozen(j)) continue;
    if (!rng.bernoulli(keep)) out.ids[j] = vocab.mask_id;
  }
  return out;
}

double unmask_probability(double s, double t) {
  if (!(s < t)) throw std::invalid_argument("posterior_step: need s < t, got s=" + std::to_string(s) +
                                            " t=" + std::to_string(t));
  const double a_s = alpha(s);
  const double a_t = alpha(t);
  if (fault::enabled(fault::Fault::posterior_sign_flip)) return (a_t - a_s) / (1.0 - a_t);
  return (a_s - a_t) / (1.0 - a_t);
}

TokenSequence posterior_step(const TokenSequence& x_t, std::span<const double> x_pred,
                             const Vocab& vocab, double s, double t, Rng& rng) {
  const double p_unmask = unmask_probability(s, t);
  const auto n = static_cast<std::size_t>(vocab.size);
  if (x_pred.size() != x_t.size() * n) {
    throw std::invalid_argument("posterior_step: x_pred has " + std::to_string(x_pred.size()) +
                                " entries, expected " + std::to_string(x_t.size() * n));
  }
  TokenSequence out = x_t;
  for (std::size_t j = 0; j < x_t.size(); ++j) {
    if (x_t.is_frozen(j) || x_t.ids[j] != vocab.mask_id) continue;
    const auto row = x_pred.subspan(j * n, n);
    check_distribution_row(row, vocab, j);
    if (rng.uniform() < p_unmask) out.ids[j] = draw_categorical(row, rng);
  }
  return out;
}

std::vector<double> antithetic_times(const NelboConfig& cfg, double u) {
  if (cfg.k == 0) throw std::invalid_argument("antithetic_times: K must be at least 1");
  if (!(cfg.delta >= 0.0 && cfg.delta < 1.0)) {
    throw std::invalid_argument("antithetic_times: delta must lie in [0, 1)");
  }
  if (!(u >= 0.0 && u < 1.0)) throw std::invalid_argument("antithetic_times: u must lie in [0, 1)");
  std::vector<double> ts(cfg.k);
  const double k = static_cast<double>(cfg.k);
  for (std::size_t i = 0; i < cfg.k; ++i) {
    ts[i] = cfg.delta + (1.0 - cfg.delta) * (static_cast<double>(i) + u) / k;
  }
  return ts;
}

std::vector<double> zero_mask_prob(std::span<const double> logits, const Vocab& vocab) {
  const auto n = static_cast<std::size_t>(vocab.size);
  if (logits.size() % n != 0) throw std::invalid_argument("zero_mask_prob: logits not a multiple of vocab size");
  const auto mask = static_cast<std::size_t>(vocab.mask_id);
  std::vector<double> out(logits.size(), 0.0);
  for (std::size_t r = 0; r < logits.size() / n; ++r) {
    const double* z = logits.data() + r * n;
    double* p = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      if (k != mask) mx = std::max(mx, z[k]);
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == mask) continue;
      p[k] = std::exp(z[k] - mx);
      sum += p[k];
    }
    for (std::size_t k = 0; k < n; ++k) p[k] /= sum;
    p[mask] = 0.0;
  }
  return out;
}

Var content_log_probs(Var logits, const Vocab& vocab) {
  const auto& shape = logits.shape();
  if (shape.size() != 2 || shape[1] != static_cast<std::size_t>(vocab.size)) {
    throw ShapeError("content_log_probs: expected [L," + std::to_string(vocab.size) + "] logits, got " +
                     to_string(shape));
  }
  const auto mask = static_cast<std::size_t>(vocab.mask_id);
  const auto n = static_cast<std::size_t>(vocab.size);
  Var content;
  if (mask == 0) {
    content = slice(logits, 1, 1, n);
  } else if (mask == n - 1) {
    content = slice(logits, 1, 0, n - 1);
  } else {
    const Var parts[] = {slice(logits, 1, 0, mask), slice(logits, 1, mask + 1, n)};
    content = concat(parts, 1);
  }
  return log_softmax(content);
}

NelboResult nelbo_loss(std::span<const NelboTerm> terms, const Vocab& vocab) {
  if (terms.empty()) throw std::invalid_argument("nelbo_loss: no terms");
  NelboResult result;
  const double k = static_cast<double>(terms.size());
  const std::size_t classes = static_cast<std::size_t>(vocab.size - 1);
  Var total;
  double ce_sum = 0.0;
  for (const auto& term : terms) {
    if (!(term.t > 0.0)) throw std::domain_error("nelbo_loss: t=" + std::to_string(term.t) + " must be positive");
    const auto& clean = *term.clean;
    const auto& noisy = *term.noisy;
    if (clean.size() != noisy.size()) throw std::invalid_argument("nelbo_loss: clean/noisy length differs");
    Var logp = content_log_probs(term.logits, vocab);
    if (logp.shape()[0] != clean.size()) throw ShapeError("nelbo_loss: logits rows differ from sequence length");

    std::vector<std::size_t> masked;
    for (std::size_t j = 0; j < noisy.size(); ++j) {
      if (!noisy.is_frozen(j) && noisy.ids[j] == vocab.mask_id) {
        if (clean.ids[j] == vocab.mask_id) throw std::invalid_argument("nelbo_loss: clean sequence contains the mask id");
        masked.push_back(j);
      }
    }
    if (masked.empty()) continue;
    result.masked += masked.size();

    const double w = 1.0 / (k * term.t * static_cast<double>(masked.size()));
    std::vector<double> weights(clean.size() * classes, 0.0);
    double clamp_penalty = 0.0;
    const auto lp = logp.value();
    for (auto j : masked) {
      const std::size_t idx = j * classes + static_cast<std::size_t>(vocab.content_index(clean.ids[j]));
      ce_sum -= std::max(lp[idx], kLogProbClamp);
      if (lp[idx] < kLogProbClamp) {
        ++result.clamped;
        clamp_penalty += -kLogProbClamp * w;
      } else {
        weights[idx] = -w;
      }
    }
    const double count = static_cast<double>(weights.size());
    Var wt = logp.tape()->constant(Tensor(logp.shape(), std::move(weights)));
    Var term_loss = scale(mean(multiply(logp, wt)), count);
    if (clamp_penalty != 0.0) term_loss = add(term_loss, logp.tape()->constant(Tensor::scalar(clamp_penalty)));
    total = total.valid() ? add(total, term_loss) : term_loss;
  }
  if (!total.valid()) {
    // Nothing masked anywhere: the estimate is exactly zero.
    total = scale(mean(terms[0].logits), 0.0);
  }
  result.loss = total;
  if (result.masked > 0) result.token_ce = ce_sum / static_cast<double>(result.masked);
  return result;
}

TokenSequence ancestral_sample(const TokenPredictor& predictor, const TokenSequence& init,
                               const Vocab& vocab, std::size_t steps, Rng& rng) {
  if (steps == 0) throw std::invalid_argument("ancestral_sample: need at least one step");
  for (std::size_t j = 0; j < init.size(); ++j) {
    if (init.is_frozen(j) && init.ids[j] == vocab.mask_id) {
      throw std::invalid_argument("ancestral_sample: frozen position holds the mask id");
    }
    if (!init.is_frozen(j) && init.ids[j] != vocab.mask_id) {
      throw std::invalid_argument("ancestral_sample: non-frozen position must start masked");
    }
  }
  const auto n = static_cast<std::size_t>(vocab.size);
  TokenSequence x = init;
  const double T = static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    if (x.count(vocab.mask_id) == 0) break;
    const double t = 1.0 - static_cast<double>(k) / T;
    const double s = (k + 1 == steps) ? 0.0 : 1.0 - static_cast<double>(k + 1) / T;
    const auto probs = predictor(x);
    if (probs.size() != x.size() * n) throw DistributionError("ancestral_sample: predictor returned wrong size");
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x.ids[j] == vocab.mask_id && probs[j * n + static_cast<std::size_t>(vocab.mask_id)] != 0.0) {
        throw DistributionError("ancestral_sample: predictor put mass on the mask id at position " +
                                std::to_string(j));
      }
    }
    x = posterior_step(x, probs, vocab, s, t, rng);
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (init.is_frozen(j) && x.ids[j] != init.ids[j]) {
        throw std::logic_error("ancestral_sample: frozen position " + std::to_string(j) + " changed");
      }
    }
  }
  return x;
}

}  // namespace ddit
