#include "ddit/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ddit {
namespace {

enum StreamTag : std::uint64_t { image_stream = 1, text_stream = 2 };

double image_timestep(const TrainConfig& cfg, Rng& rng) {
  if (cfg.image_timesteps == "uniform") return std::clamp(rng.uniform(), 1e-5, 1.0 - 1e-5);
  return sample_timestep(rng);
}

const TokenSequence& pick_text(const world::Example& ex, const TrainConfig& cfg, Rng& rng) {
  if (!ex.qa.empty() && rng.bernoulli(cfg.qa_fraction)) return ex.qa[rng.below(ex.qa.size())].sequence;
  return ex.caption;
}

std::vector<double> concat_targets(const StepPlan& plan) {
  std::vector<double> out;
  for (const auto& term : plan.image) out.insert(out.end(), term.target.begin(), term.target.end());
  return out;
}

std::string describe_example(const StepOptions& opts, std::size_t slot) {
  std::string s = "batch slot " + std::to_string(slot);
  if (slot < opts.example_ids.size()) s += " (dataset example " + std::to_string(opts.example_ids[slot]) + ")";
  return s;
}

// Re-evaluates the terms one at a time to find which example overflowed.
[[noreturn]] void rethrow_with_example(ModelParams& params, const DDiTConfig& model,
                                       std::span<const world::Example* const> batch, const StepPlan& plan,
                                       double lambda, const StepOptions& opts, const NumericError& original) {
  for (const auto& term : plan.image) {
    StepPlan one;
    one.image.push_back(term);
    one.image.back().example = 0;
    const world::Example* ex = batch[term.example];
    try {
      Tape tape;
      build_joint_loss(tape, params, model, std::span(&ex, 1), one, lambda);
    } catch (const NumericError& e) {
      throw NumericError("non-finite image loss at " + describe_example(opts, term.example) + ", t = " +
                         std::to_string(term.t) + ": " + e.what());
    }
  }
  for (const auto& term : plan.text) {
    StepPlan one;
    one.text.push_back(term);
    one.text.back().example = 0;
    const world::Example* ex = batch[term.example];
    try {
      Tape tape;
      build_joint_loss(tape, params, model, std::span(&ex, 1), one, lambda);
    } catch (const NumericError& e) {
      throw NumericError("non-finite text loss at " + describe_example(opts, term.example) + ", t = " +
                         std::to_string(term.t) + ": " + e.what());
    }
  }
  throw NumericError(std::string("non-finite loss in batch: ") + original.what());
}

}  // namespace

StepPlan plan_step(std::span<const world::Example* const> batch, const RunConfig& cfg, std::uint64_t step_seed) {
  const auto& tc = cfg.train;
  const Vocab vocab = cfg.model.vocabulary();
  StepPlan plan;

  Rng irng(mix_seed(step_seed, image_stream));
  const auto null_text = world::null_caption(cfg.model.text_len);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = *batch[b];
    StepPlan::ImageTerm term;
    term.example = b;
    term.caption = irng.bernoulli(tc.cond_dropout) ? null_text : ex.caption;
    term.t = image_timestep(tc, irng);
    const ImageGrid noise = standard_normal_grid(ex.image.shape, irng);
    term.noisy = interpolate(ex.image, noise, term.t);
    term.target = patchify(velocity_target(ex.image, noise), cfg.model.patch);
    plan.image.push_back(std::move(term));
  }

  Rng trng(mix_seed(step_seed, text_stream));
  const std::size_t K = tc.nelbo_k;
  const std::size_t B = batch.size();
  std::vector<double> shared;
  if (!tc.antithetic_per_example) shared = antithetic_times({B * K, tc.nelbo_delta}, trng.uniform());
  plan.text.resize(B * K);
  for (std::size_t b = 0; b < B; ++b) {
    const TokenSequence& seq = pick_text(*batch[b], tc, trng);
    std::vector<double> own;
    if (tc.antithetic_per_example) own = antithetic_times({K, tc.nelbo_delta}, trng.uniform());
    for (std::size_t j = 0; j < K; ++j) {
      auto& term = plan.text[b * K + j];
      term.example = b;
      term.clean = seq;
      // Shared draws spread each example's K terms across the strata.
      term.t = tc.antithetic_per_example ? own[j] : shared[j * B + b];
      term.noisy = forward_mask(seq, vocab, term.t, trng);
    }
  }
  return plan;
}

JointLoss build_joint_loss(Tape& tape, ModelParams& params, const DDiTConfig& model,
                           std::span<const world::Example* const> batch, const StepPlan& plan, double lambda) {
  const Vocab vocab = model.vocabulary();
  JointLoss out;

  if (!plan.image.empty()) {
    std::vector<BatchItem> items;
    items.reserve(plan.image.size());
    for (const auto& term : plan.image) {
      if (term.caption.count(vocab.mask_id) != 0) {
        throw std::logic_error("image loss: conditioning caption contains mask tokens");
      }
      items.push_back({&term.noisy, &term.caption, term.t});
    }
    const auto vars = forward_batch(tape, params, model, items);
    out.image = fm_loss(vars.velocity, concat_targets(plan));
  }

  if (!plan.text.empty()) {
    std::vector<BatchItem> items;
    items.reserve(plan.text.size());
    for (const auto& term : plan.text) {
      // Text terms condition on the clean image at timestep exactly 0.
      if (term.example >= batch.size()) throw std::out_of_range("text term refers past the batch");
      items.push_back({&batch[term.example]->image, &term.noisy, 0.0});
    }
    const auto vars = forward_batch(tape, params, model, items);
    const std::size_t L = model.text_len;
    std::vector<NelboTerm> terms;
    terms.reserve(plan.text.size());
    for (std::size_t i = 0; i < plan.text.size(); ++i) {
      Var rows = plan.text.size() == 1 ? vars.text_logits : slice(vars.text_logits, 0, i * L, (i + 1) * L);
      terms.push_back({rows, &plan.text[i].clean, &plan.text[i].noisy, plan.text[i].t});
    }
    auto nelbo = nelbo_loss(terms, vocab);
    out.text = nelbo.loss;
    out.masked = nelbo.masked;
    out.clamped = nelbo.clamped;
    out.token_ce = nelbo.token_ce;
  }

  if (out.image.valid() && out.text.valid()) {
    out.total = add(out.image, scale(out.text, lambda));
  } else if (out.image.valid()) {
    out.total = out.image;
  } else if (out.text.valid()) {
    out.total = scale(out.text, lambda);
  } else {
    throw std::invalid_argument("build_joint_loss: empty plan");
  }
  return out;
}

AdamWConfig adamw_config(const TrainConfig& cfg) {
  AdamWConfig a;
  a.lr = cfg.lr;
  a.beta1 = cfg.beta1;
  a.beta2 = cfg.beta2;
  a.eps = cfg.adam_eps;
  a.weight_decay = cfg.weight_decay;
  a.warmup_iters = cfg.warmup_iters;
  return a;
}

StepResult joint_step(std::span<const world::Example* const> batch, ModelParams& params, AdamState& opt,
                      const RunConfig& cfg, std::uint64_t step_seed, const StepOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("joint_step: empty batch");
  StepPlan plan = plan_step(batch, cfg, step_seed);
  if (!opts.image_loss) plan.image.clear();
  if (!opts.text_loss) plan.text.clear();
  const double lambda = cfg.train.lambda_text;

  params.zero_grad();
  Tape tape;
  JointLoss loss;
  try {
    loss = build_joint_loss(tape, params, cfg.model, batch, plan, lambda);
  } catch (const NumericError& e) {
    rethrow_with_example(params, cfg.model, batch, plan, lambda, opts, e);
  }
  tape.backward(loss.total);

  StepResult r;
  r.image = loss.image.valid() ? loss.image.item() : 0.0;
  r.text = loss.text.valid() ? loss.text.item() : 0.0;
  r.total = loss.total.item();
  r.masked = loss.masked;
  r.clamped = loss.clamped;
  r.token_ce = loss.token_ce;
  r.grad_norm = clip_grad_norm(params, cfg.train.grad_clip);
  const auto acfg = adamw_config(cfg.train);
  r.lr = warmup_lr(acfg.lr, opt.step + 1, acfg.warmup_iters);
  adamw_update(params, opt, acfg);
  return r;
}

// ---------------------------------------------------------------- loop

TrainState TrainState::fresh(const RunConfig& cfg) {
  Rng init(mix_seed(cfg.train.seed, 0x696e6974));
  TrainState s{ModelParams::init(cfg.model, init), {}, Rng(mix_seed(cfg.train.seed, 0x6f726465)), 0};
  s.optimizer = AdamState::zeros_like(s.params);
  return s;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ck) {
  TrainState s{ck.params, ck.optimizer, Rng(0), ck.step};
  s.order.load(ck.rng_state);
  return s;
}

Checkpoint TrainState::to_checkpoint(const RunConfig& cfg, std::uint64_t dataset_fingerprint) const {
  Checkpoint ck;
  ck.config = cfg;
  ck.dataset_fingerprint = dataset_fingerprint;
  ck.step = step;
  ck.params = params;
  ck.optimizer = optimizer;
  ck.rng_state = order.save();
  return ck;
}

std::vector<world::Example> held_out_examples(std::size_t count, std::uint64_t data_seed) {
  return generate_dataset(count, mix_seed(data_seed, 0x68656c64)).examples;
}

namespace {

// Keeps only records up to and including `step` so a resumed run continues
// the log exactly where its checkpoint left off.
void truncate_metrics(const std::filesystem::path& path, std::uint64_t step) {
  std::vector<std::string> keep;
  if (step > 0) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("step")) continue;
      if (j["step"].get<std::uint64_t>() <= step) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write metrics log '" + path.string() + "'");
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

void run_training(const RunConfig& cfg, const Dataset& data, TrainState& state, const TrainOptions& opts) {
  cfg.validate();
  if (data.examples.empty()) throw std::invalid_argument("run_training: empty dataset");
  if (!(data.examples.front().image.shape == cfg.model.image)) {
    throw ConfigError("run_training: dataset grid does not match model image shape");
  }
  namespace fs = std::filesystem;
  const fs::path dir = opts.out_dir.empty() ? fs::path(".") : fs::path(opts.out_dir);
  fs::create_directories(dir);
  const fs::path metrics_path = dir / "metrics.jsonl";
  const fs::path checkpoint_path = dir / "checkpoint.bin";
  truncate_metrics(metrics_path, state.step);
  {
    std::ofstream c(dir / "config.ini", std::ios::trunc);
    c << "# ddit " << kToolVersion << "\n" << cfg.to_text();
    if (!c) throw std::runtime_error("cannot write resolved config to '" + dir.string() + "'");
  }

  std::ofstream log(metrics_path, std::ios::app);
  const auto fingerprint = data.fingerprint();
  const auto& tc = cfg.train;
  const std::uint64_t end = opts.stop_after > 0 ? std::min<std::uint64_t>(opts.stop_after, tc.steps) : tc.steps;
  EvalSettings es;
  es.caption_steps = cfg.sample.caption_steps;
  es.answer_steps = cfg.sample.answer_steps;
  es.image_steps = cfg.sample.image_steps;
  es.guidance = cfg.sample.guidance;
  es.seed = tc.seed;

  std::vector<const world::Example*> batch(tc.batch);
  StepOptions step_opts;
  step_opts.example_ids.resize(tc.batch);
  while (state.step < end) {
    for (std::size_t b = 0; b < tc.batch; ++b) {
      const auto idx = static_cast<std::size_t>(state.order.below(data.examples.size()));
      step_opts.example_ids[b] = idx;
      batch[b] = &data.examples[idx];
    }
    StepResult r;
    try {
      r = joint_step(batch, state.params, state.optimizer, cfg, mix_seed(tc.seed, state.step + 1), step_opts);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(state.step + 1) + ": " + e.what());
    }
    state.step += 1;

    nlohmann::json rec;
    rec["step"] = state.step;
    rec["loss"] = r.total;
    rec["image"] = r.image;
    rec["text"] = r.text;
    rec["lambda"] = tc.lambda_text;
    rec["lr"] = r.lr;
    rec["grad_norm"] = r.grad_norm;
    rec["masked"] = r.masked;
    rec["clamped"] = r.clamped;
    rec["token_ce"] = r.token_ce;
    log << rec.dump() << '\n';

    const bool last = state.step == end;
    if (tc.eval_every > 0 && !opts.eval_set.empty() && (state.step % tc.eval_every == 0 || state.step == tc.steps)) {
      const auto m = evaluate(state.params, cfg.model, opts.eval_set, es);
      nlohmann::json ev;
      ev["step"] = state.step;
      ev["eval"] = m;
      log << ev.dump() << '\n';
      if (opts.progress) {
        std::ostringstream os;
        os << "eval step " << state.step << ": caption " << m.at("caption.attribute") << ", vqa "
           << m.at("vqa.accuracy") << ", t2i " << m.at("t2i.attribute");
        opts.progress(os.str());
      }
    }
    log.flush();
    if (!log) throw std::runtime_error("failed writing metrics log '" + metrics_path.string() + "'");

    if (last || (tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0)) {
      save_checkpoint(checkpoint_path.string(), state.to_checkpoint(cfg, fingerprint));
    }
    if (opts.progress && (state.step % 10 == 0 || last)) {
      std::ostringstream os;
      os << "step " << state.step << "/" << tc.steps << " loss " << r.total << " (image " << r.image << ", text "
         << r.text << ") lr " << r.lr;
      opts.progress(os.str());
    }
  }
}

}  // namespace ddit
