#include "ddit/evaluation.hpp"

#include <cmath>
#include <numeric>

#include "ddit/sampling.hpp"
#include "json.hpp"

namespace ddit {

namespace {

enum StreamTag : std::uint64_t { caption_stream = 1, answer_stream = 2, image_stream = 3 };

}  // namespace

Metrics evaluate(ModelParams& params, const DDiTConfig& cfg, std::span<const world::Example> examples,
                 const EvalSettings& settings) {
  world::ScoreTally tally;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const std::uint64_t key = mix_seed(settings.seed, i);
    if (settings.captions) {
      Rng rng(mix_seed(key, caption_stream));
      const auto caption = sample_caption(params, cfg, ex.image, settings.caption_steps, rng);
      tally.add_scene("caption", world::score_scene(world::parse_caption(caption.ids), ex.scene));
    }
    if (settings.answers) {
      Rng rng(mix_seed(key, answer_stream));
      for (const auto& qa : ex.qa) {
        std::vector<int> question;
        for (std::size_t j = 0; j < qa.sequence.size() && qa.sequence.is_frozen(j); ++j) {
          question.push_back(qa.sequence.ids[j]);
        }
        const auto answer = sample_answer(params, cfg, ex.image, question, settings.answer_steps, rng);
        tally.add_answer("vqa", answer.ids[qa.answer_pos] == qa.answer);
      }
    }
    if (settings.images) {
      Rng rng(mix_seed(key, image_stream));
      ImageSampling opts{settings.image_steps, settings.guidance, true};
      const auto img = sample_image(params, cfg, ex.caption, opts, rng);
      tally.add_scene("t2i", world::score_scene(world::decode_grid(img).scene, ex.scene));
    }
  }
  return tally.metrics();
}

StepsReport evaluate_steps(ModelParams& params, const DDiTConfig& cfg, std::span<const world::Example> examples,
                           std::span<const std::size_t> steps, std::span<const std::uint64_t> seeds,
                           EvalSettings base) {
  if (steps.empty() || seeds.empty()) throw std::invalid_argument("evaluate_steps: need at least one T and one seed");
  StepsReport report;
  for (std::size_t T : steps) {
    StepsRow row;
    row.steps = T;
    EvalSettings s = base;
    s.caption_steps = s.answer_steps = s.image_steps = T;
    for (auto seed : seeds) {
      s.seed = seed;
      row.per_seed.push_back(evaluate(params, cfg, examples, s));
    }
    const double n = static_cast<double>(row.per_seed.size());
    for (const auto& [key, _] : row.per_seed.front()) {
      double sum = 0.0;
      for (const auto& m : row.per_seed) sum += m.at(key);
      const double mu = sum / n;
      double ss = 0.0;
      for (const auto& m : row.per_seed) ss += (m.at(key) - mu) * (m.at(key) - mu);
      row.mean[key] = mu;
      row.stderr_[key] = n > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    }
    report.rows.push_back(std::move(row));
  }

  const auto& key = report.metric;
  if (report.rows.front().mean.contains(key)) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(report.rows.size());
    for (const auto& r : report.rows) {
      const double x = std::log2(static_cast<double>(r.steps));
      const double y = r.mean.at(key);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double den = n * sxx - sx * sx;
    report.slope = den > 0 ? (n * sxy - sx * sy) / den : 0.0;
    for (std::size_t k = 0; k + 1 < report.rows.size(); ++k) {
      const auto& a = report.rows[k];
      const auto& b = report.rows[k + 1];
      // Seeds are shared across T, so compare per-seed differences.
      const std::size_t m = a.per_seed.size();
      std::vector<double> d(m);
      for (std::size_t s = 0; s < m; ++s) d[s] = b.per_seed[s].at(key) - a.per_seed[s].at(key);
      const double mu = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(m);
      double ss = 0.0;
      for (double v : d) ss += (v - mu) * (v - mu);
      const double se = m > 1 ? std::sqrt(ss / static_cast<double>(m - 1) / static_cast<double>(m)) : 0.0;
      report.diffs.push_back({mu, se});
      if (mu < -se) report.monotone_within_se = false;
    }
  } else {
    report.monotone_within_se = false;
  }
  return report;
}

std::string StepsReport::to_json() const {
  nlohmann::json j;
  j["metric"] = metric;
  j["slope_per_log2_steps"] = slope;
  j["monotone_within_se"] = monotone_within_se;
  auto& rows_j = j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["steps"] = r.steps;
    row["seeds"] = r.per_seed.size();
    row["mean"] = r.mean;
    row["stderr"] = r.stderr_;
    rows_j.push_back(std::move(row));
  }
  auto& diffs_j = j["consecutive_differences"] = nlohmann::json::array();
  for (std::size_t k = 0; k < diffs.size(); ++k) {
    diffs_j.push_back({{"from", rows[k].steps}, {"to", rows[k + 1].steps}, {"mean", diffs[k].mean},
                       {"stderr", diffs[k].stderr_}});
  }
  return j.dump(2);
}

}  // namespace ddit
