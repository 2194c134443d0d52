#pragma once

// Joint training: every step evaluates a flow-matching loss on noised
// images conditioned on clean captions, and a masked-diffusion loss on
// noised captions or QA sequences conditioned on clean images, then takes
// one AdamW update on L_image + lambda * L_text.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddit/checkpoint.hpp"
#include "ddit/config.hpp"
#include "ddit/dataset_io.hpp"
#include "ddit/evaluation.hpp"
#include "ddit/model.hpp"
#include "ddit/optimizer.hpp"

namespace ddit {

// All random draws of one step, fixed before any model evaluation.
struct StepPlan {
  struct ImageTerm {
    std::size_t example = 0;       // index into the batch
    TokenSequence caption;         // clean caption or the null caption
    double t = 0.0;
    ImageGrid noisy;               // (1 - t) x + t eps
    std::vector<double> target;    // eps - x, patch-major
  };
  struct TextTerm {
    std::size_t example = 0;
    TokenSequence clean;           // caption or QA sequence
    TokenSequence noisy;
    double t = 0.0;
  };
  std::vector<ImageTerm> image;
  std::vector<TextTerm> text;
};

// Image draws come from stream (seed, 1) and text draws from stream
// (seed, 2), so either half can be dropped without disturbing the other.
StepPlan plan_step(std::span<const world::Example* const> batch, const RunConfig& cfg, std::uint64_t step_seed);

struct JointLoss {
  Var total;
  Var image;     // invalid when the plan has no image terms
  Var text;      // invalid when the plan has no text terms
  std::size_t masked = 0;
  std::size_t clamped = 0;
  double token_ce = 0.0;
};

// Builds L_image + lambda * L_text on `tape`. Text terms see the clean image
// at timestep 0; image terms see captions free of mask tokens.
JointLoss build_joint_loss(Tape& tape, ModelParams& params, const DDiTConfig& model,
                           std::span<const world::Example* const> batch, const StepPlan& plan, double lambda);

struct StepOptions {
  bool image_loss = true;
  bool text_loss = true;
  std::vector<std::size_t> example_ids;   // dataset index per batch slot, for diagnostics
};

struct StepResult {
  double image = 0.0;
  double text = 0.0;
  double total = 0.0;
  std::size_t masked = 0;
  std::size_t clamped = 0;
  double token_ce = 0.0;
  double grad_norm = 0.0;   // before clipping
  double lr = 0.0;
};

AdamWConfig adamw_config(const TrainConfig& cfg);

// One optimizer update. A non-finite loss raises NumericError naming the
// offending example.
StepResult joint_step(std::span<const world::Example* const> batch, ModelParams& params, AdamState& opt,
                      const RunConfig& cfg, std::uint64_t step_seed, const StepOptions& opts = {});

struct TrainState {
  ModelParams params;
  AdamState optimizer;
  Rng order;              // batch index stream, advanced once per step
  std::uint64_t step = 0;

  static TrainState fresh(const RunConfig& cfg);
  static TrainState from_checkpoint(const Checkpoint& ck);
  Checkpoint to_checkpoint(const RunConfig& cfg, std::uint64_t dataset_fingerprint) const;
};

struct TrainOptions {
  std::string out_dir;                    // checkpoint.bin, metrics.jsonl
  std::uint64_t stop_after = 0;           // stop early at this step (0 = run to the end)
  std::vector<world::Example> eval_set;   // held-out examples for periodic evaluation
  std::function<void(const std::string&)> progress;  // human-readable status lines
};

// Runs from state.step to cfg.train.steps. Appends one JSON record per step
// (and per evaluation) to out_dir/metrics.jsonl and writes
// out_dir/checkpoint.bin at the checkpoint cadence and at the end.
void run_training(const RunConfig& cfg, const Dataset& data, TrainState& state, const TrainOptions& opts);

// Held-out examples for evaluation, disjoint from the training stream.
std::vector<world::Example> held_out_examples(std::size_t count, std::uint64_t data_seed);

}  // namespace ddit
