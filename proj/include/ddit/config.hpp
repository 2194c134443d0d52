#pragma once

// Run configuration: a versioned key = value file with [model], [train] and
// [sample] sections. Unknown keys are rejected by name.
//
//   version = 1
//   [model]
//   depth = 4
//   ...

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ddit/model.hpp"

namespace ddit {

inline constexpr const char* kToolVersion = "0.1.0";

struct TrainConfig {
  double lambda_text = 1.0;
  double lr = 3e-4;
  std::size_t warmup_iters = 200;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;           // global-norm clip; 0 disables
  std::size_t batch = 64;
  std::size_t steps = 20000;
  double cond_dropout = 0.1;        // rate of null-caption substitution
  double qa_fraction = 0.5;         // share of text-loss sequences that are QA
  std::size_t nelbo_k = 1;          // antithetic timesteps per example
  double nelbo_delta = 1e-3;
  bool antithetic_per_example = false;  // default shares one draw per batch
  std::string image_timesteps = "logit_normal";  // or "uniform"
  std::uint64_t seed = 0;
  std::size_t eval_every = 1000;    // 0 disables periodic evaluation
  std::size_t eval_examples = 32;
  std::size_t checkpoint_every = 500;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct SampleConfig {
  std::size_t image_steps = 28;
  double guidance = 7.0;
  std::size_t caption_steps = 16;
  std::size_t answer_steps = 16;

  void validate() const;
  bool operator==(const SampleConfig&) const = default;
};

struct RunConfig {
  DDiTConfig model;
  TrainConfig train;
  SampleConfig sample;

  static constexpr int kVersion = 1;

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::string& path);
  // Applies "section.key=value".
  void set(std::string_view assignment);
  void set(std::string_view dotted_key, std::string_view value);
  void validate() const;

  // Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;
  // Hash of the canonical [model] and [train] sections; sampler settings
  // do not affect resumability.
  std::uint64_t training_hash() const;

  bool operator==(const RunConfig&) const = default;
};

}  // namespace ddit
