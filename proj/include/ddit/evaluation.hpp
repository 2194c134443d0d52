#pragma once

// Oracle-scored evaluation of the three sampling modes on held-out
// examples: captions are parsed back to scenes, answers compared to the
// answer token, and generated images decoded by the exact grid decoder.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ddit/model.hpp"
#include "ddit/world.hpp"

namespace ddit {

using Metrics = std::map<std::string, double>;

struct EvalSettings {
  std::size_t caption_steps = 16;
  std::size_t answer_steps = 16;
  std::size_t image_steps = 28;
  double guidance = 7.0;
  std::uint64_t seed = 0;
  bool captions = true;
  bool answers = true;
  bool images = true;
};

// Keys: caption.{color,shape,quadrant,attribute,count,exact,unparsed,n},
// vqa.{accuracy,n}, t2i.{color,...}. Trajectory i draws from a stream keyed
// by (seed, i), so results do not depend on evaluation order.
Metrics evaluate(ModelParams& params, const DDiTConfig& cfg, std::span<const world::Example> examples,
                 const EvalSettings& settings);

struct StepsRow {
  std::size_t steps = 0;
  std::vector<Metrics> per_seed;
  Metrics mean;
  Metrics stderr_;   // standard error of the mean across seeds
};

struct StepsReport {
  std::string metric = "caption.attribute";
  std::vector<StepsRow> rows;
  // Least-squares slope of the metric against log2(T), seed means.
  double slope = 0.0;
  struct Diff {
    double mean = 0.0;
    double stderr_ = 0.0;
  };
  // Row k+1 minus row k, per seed, then averaged.
  std::vector<Diff> diffs;
  // Every consecutive paired difference has mean >= -(its standard error).
  bool monotone_within_se = true;

  std::string to_json() const;
};

// Runs `evaluate` once per (T, seed). T applies to every enabled mode.
StepsReport evaluate_steps(ModelParams& params, const DDiTConfig& cfg, std::span<const world::Example> examples,
                           std::span<const std::size_t> steps, std::span<const std::uint64_t> seeds,
                           EvalSettings base);

}  // namespace ddit
