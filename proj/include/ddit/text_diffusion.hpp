#pragma once

// Absorbing-state (masked) diffusion over fixed-length token sequences with
// the linear schedule alpha(t) = 1 - t.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ddit/rng.hpp"
#include "ddit/tensor.hpp"

namespace ddit {

class DistributionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Vocab {
  int size = 0;     // includes the mask id
  int mask_id = 0;

  Vocab() = default;
  Vocab(int size, int mask_id);

  // Index of a non-mask id among the size - 1 content classes.
  int content_index(int id) const { return id < mask_id ? id : id - 1; }
  int content_id(int index) const { return index < mask_id ? index : index + 1; }
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> frozen;  // 1 = conditioning position, never masked

  TokenSequence() = default;
  explicit TokenSequence(std::vector<int> ids);
  TokenSequence(std::vector<int> ids, std::vector<std::uint8_t> frozen);

  std::size_t size() const { return ids.size(); }
  bool is_frozen(std::size_t j) const { return frozen[j] != 0; }
  std::size_t count(int id) const;

  bool operator==(const TokenSequence&) const = default;
};

struct NelboConfig {
  std::size_t k = 1;      // antithetic timesteps per estimate
  double delta = 1e-3;    // lower cutoff of the time interval
};

// alpha(t) = 1 - t. Throws std::out_of_range outside [0, 1].
double alpha(double t);

// Each non-frozen position keeps its id with probability alpha(t), else
// becomes the mask id. Frozen positions pass through.
TokenSequence forward_mask(const TokenSequence& x, const Vocab& vocab, double t, Rng& rng);

// One reverse step from time t to s < t. `x_pred` holds size x N
// probabilities (row-major). Unmasked positions carry over; a masked
// position unmasks with probability (alpha_s - alpha_t) / (1 - alpha_t) and
// then draws its id from its row of x_pred.
TokenSequence posterior_step(const TokenSequence& x_t, std::span<const double> x_pred,
                             const Vocab& vocab, double s, double t, Rng& rng);

// Probability that a masked position unmasks between t and s.
double unmask_probability(double s, double t);

// t_i = delta + (1 - delta) * (i - 1 + u) / K for i = 1..K.
std::vector<double> antithetic_times(const NelboConfig& cfg, double u);

// Softmax over the content classes with the mask class pinned at exactly 0.
std::vector<double> zero_mask_prob(std::span<const double> logits, const Vocab& vocab);

// Log-probabilities over the size - 1 content classes (mask column removed),
// on the tape. Input rows have width vocab.size.
Var content_log_probs(Var logits, const Vocab& vocab);

struct NelboTerm {
  Var logits;                    // L x N, predicted from `noisy`
  const TokenSequence* clean = nullptr;
  const TokenSequence* noisy = nullptr;
  double t = 0.0;
};

struct NelboResult {
  Var loss;
  std::size_t masked = 0;    // positions contributing across all terms
  std::size_t clamped = 0;   // positions whose log-probability hit the clamp
  // Unweighted mean of -log p over all masked positions (clamped values
  // included). Diagnostic only, no gradient.
  double token_ce = 0.0;
};

inline constexpr double kLogProbClamp = -30.0;

// (1/K) sum_i (1/t_i) * mean over masked positions of -log p(x_j | x_{t_i}).
// Terms with no masked positions contribute zero. Log-probabilities below
// kLogProbClamp are clamped (zero gradient) and counted.
NelboResult nelbo_loss(std::span<const NelboTerm> terms, const Vocab& vocab);

// Maps a partially masked sequence to size x N probabilities with zero mask
// mass.
using TokenPredictor = std::function<std::vector<double>(const TokenSequence&)>;

// Reverse-time sampler on the grid t_k = 1 - k/T. Frozen positions are kept
// fixed throughout; the result contains no mask ids.
TokenSequence ancestral_sample(const TokenPredictor& predictor, const TokenSequence& init,
                               const Vocab& vocab, std::size_t steps, Rng& rng);

}  // namespace ddit
