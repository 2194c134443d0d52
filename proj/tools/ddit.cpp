// ddit: data generation, training, sampling, evaluation and verification.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ddit/binary_io.hpp"
#include "ddit/checkpoint.hpp"
#include "ddit/config.hpp"
#include "ddit/dataset_io.hpp"
#include "ddit/evaluation.hpp"
#include "ddit/fault.hpp"
#include "ddit/ppm.hpp"
#include "ddit/sampling.hpp"
#include "ddit/trainer.hpp"
#include "ddit/verify.hpp"
#include "ddit/world.hpp"

namespace {

using namespace ddit;

enum Exit { ok = 0, usage = 1, verification = 2, numeric = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

TokenSequence parse_caption_arg(const std::string& text, std::size_t length) {
  auto ids = world::tokenize(text);
  if (ids.size() > length) throw UsageError("caption has " + std::to_string(ids.size()) + " tokens, limit is " +
                                            std::to_string(length));
  ids.resize(length, world::tok::pad);
  return TokenSequence(std::move(ids));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string out;
  std::size_t count = 1000;
  std::uint64_t seed = 0;
};

int gen_data(const GenArgs& a) {
  const auto data = generate_dataset(a.count, a.seed);
  write_dataset(a.out, data);
  std::cout << "wrote " << data.examples.size() << " examples to " << a.out << " (fingerprint " << std::hex
            << data.fingerprint() << std::dec << ")\n";
  return ok;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string data;
  std::string out = "run";
  bool resume = false;
  std::uint64_t stop_after = 0;
  bool quiet = false;
};

int train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  for (const auto& s : a.sets) cfg.set(s);
  cfg.validate();
  const auto data = read_dataset(a.data);
  TrainOptions opts;
  opts.out_dir = a.out;
  opts.stop_after = a.stop_after;
  if (cfg.train.eval_every > 0 && cfg.train.eval_examples > 0) {
    opts.eval_set = held_out_examples(cfg.train.eval_examples, data.seed);
  }
  if (!a.quiet) opts.progress = [](const std::string& line) { std::cerr << line << "\n"; };

  const auto ck_path = (std::filesystem::path(a.out) / "checkpoint.bin").string();
  TrainState state = TrainState::fresh(cfg);
  if (a.resume) {
    const auto ck = load_checkpoint(ck_path);
    if (ck.config.training_hash() != cfg.training_hash()) {
      throw UsageError("refusing to resume: config hash in " + ck_path + " does not match the requested config");
    }
    if (ck.dataset_fingerprint != data.fingerprint()) {
      throw UsageError("refusing to resume: checkpoint was trained on a different dataset");
    }
    state = TrainState::from_checkpoint(ck);
    std::cerr << "resuming at step " << state.step << "\n";
  }
  const auto from_step = state.step;
  const auto start = std::chrono::steady_clock::now();
  run_training(cfg, data, state, opts);
  // Wall time lives outside metrics.jsonl so resumed logs stay bit-comparable.
  {
    nlohmann::json rec;
    rec["from_step"] = from_step;
    rec["to_step"] = state.step;
    rec["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ofstream wall(std::filesystem::path(a.out) / "wallclock.jsonl", std::ios::app);
    wall << rec.dump() << '\n';
  }
  std::cerr << "finished at step " << state.step << "; outputs in " << a.out << "\n";
  return ok;
}

// ---------------------------------------------------------------- samplers

struct SampleArgs {
  std::string checkpoint;
  std::string caption;
  std::string image;
  std::string question;
  std::string out;
  std::size_t steps = 0;
  double guidance = -1.0;
  bool no_guidance = false;
  std::uint64_t seed = 0;
  bool trace = false;
};

int t2i(const SampleArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto& m = ck.config.model;
  ImageSampling opts;
  opts.steps = a.steps > 0 ? a.steps : ck.config.sample.image_steps;
  opts.guidance = a.guidance >= 0.0 ? a.guidance : ck.config.sample.guidance;
  opts.guidance_enabled = !a.no_guidance;
  Rng rng(a.seed);
  const auto img = sample_image(ck.params, m, parse_caption_arg(a.caption, m.text_len), opts, rng);
  write_ppm(a.out, img);
  const auto decoded = world::decode_grid(img);
  std::cout << "wrote " << a.out << "; decoder reads: "
            << world::detokenize(world::caption_tokens(decoded.scene, 64).ids) << "\n";
  return ok;
}

int caption(const SampleArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto img = read_ppm(a.image);
  Rng rng(a.seed);
  const auto steps = a.steps > 0 ? a.steps : ck.config.sample.caption_steps;
  const auto out = sample_caption(ck.params, ck.config.model, img, steps, rng);
  std::cout << world::detokenize(out.ids) << "\n";
  return ok;
}

int vqa(const SampleArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto img = read_ppm(a.image);
  const auto question = world::tokenize(a.question);
  Rng rng(a.seed);
  const auto steps = a.steps > 0 ? a.steps : ck.config.sample.answer_steps;
  std::size_t step = 0;
  InputTrace trace;
  if (a.trace) {
    trace = [&](const TokenSequence& in) {
      std::cerr << "step " << step++ << ":";
      for (int id : in.ids) std::cerr << ' ' << (id == ck.config.model.vocabulary().mask_id ? "<mask>" : world::words().at(id));
      std::cerr << "\n";
    };
  }
  const auto out = sample_answer(ck.params, ck.config.model, img, question, steps, rng, trace);
  const std::vector<int> answer(out.ids.begin() + static_cast<std::ptrdiff_t>(question.size()), out.ids.end());
  std::cout << world::detokenize(answer) << "\n";
  return ok;
}

struct RenderArgs {
  std::string caption;
  std::string out;
};

int render(const RenderArgs& a) {
  const auto scene = world::parse_caption(parse_caption_arg(a.caption, world::kTextLen).ids);
  if (!scene) throw UsageError("caption does not describe a scene: '" + a.caption + "'");
  write_ppm(a.out, world::render(*scene));
  std::cout << "wrote " << a.out << "\n";
  return ok;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::size_t examples = 100;
  std::uint64_t data_seed = 0;
  std::vector<std::size_t> steps{4, 8, 16, 32};
  std::size_t seeds = 1;
  std::uint64_t seed = 0;
  double guidance = -1.0;
  bool no_images = false;
  std::string out;
};

int eval(const EvalArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  std::vector<world::Example> examples;
  if (!a.data.empty()) {
    auto data = read_dataset(a.data);
    examples = std::move(data.examples);
    if (examples.size() > a.examples) examples.resize(a.examples);
  } else {
    examples = held_out_examples(a.examples, a.data_seed);
  }
  EvalSettings base;
  base.guidance = a.guidance >= 0.0 ? a.guidance : ck.config.sample.guidance;
  base.images = !a.no_images;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.seed + i);
  const auto report = evaluate_steps(ck.params, ck.config.model, examples, a.steps, seeds, base);
  const auto text = report.to_json();
  std::cout << text << "\n";
  if (!a.out.empty()) {
    const std::filesystem::path out(a.out);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    write_text(out, text + "\n");
    write_text(out.string() + ".config.ini", std::string("# ddit ") + kToolVersion + "\n" + ck.config.to_text());
  }
  return ok;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  std::vector<std::string> only;
  std::string inject;
  bool list = false;
};

int verify_cmd(const VerifyArgs& a) {
  if (a.list) {
    for (const auto& c : verify::registry()) std::cout << c.name << "  " << c.summary << "\n";
    return ok;
  }
  if (a.inject == "posterior_sign_flip") fault::inject(fault::Fault::posterior_sign_flip);
  else if (a.inject == "euler_sign_flip") fault::inject(fault::Fault::euler_sign_flip);
  else if (!a.inject.empty()) throw UsageError("unknown fault '" + a.inject + "' (posterior_sign_flip, euler_sign_flip)");
  for (const auto& name : a.only) verify::find(name);  // fail fast on typos

  std::size_t failed = 0;
  const auto reports = verify::run(a.only, [&](const verify::Report& r) {
    if (!r.outcome.passed) ++failed;
    std::cout << (r.outcome.passed ? "PASS " : "FAIL ") << r.name << " (" << std::fixed << std::setprecision(1)
              << r.seconds << "s): " << r.outcome.detail << std::endl;
  });
  std::cout << (reports.size() - failed) << "/" << reports.size() << " checks passed\n";
  return failed == 0 ? ok : verification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ddit: dual-branch diffusion transformer on a synthetic shapes world"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset file and manifest");
  gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();
  gen_cmd->add_option("--count", gen.count, "Number of examples")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Config file ([model]/[train]/[sample] key = value)");
  train_cmd->add_option("--set", tr.sets, "Override, e.g. train.steps=100 (repeatable)");
  train_cmd->add_option("--data", tr.data, "Dataset file from gen-data")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->capture_default_str();
  train_cmd->add_flag("--resume", tr.resume, "Continue from <out>/checkpoint.bin");
  train_cmd->add_option("--stop-after", tr.stop_after, "Stop (with a checkpoint) once this step is reached");
  train_cmd->add_flag("--quiet", tr.quiet, "No progress output");

  SampleArgs ti;
  auto* t2i_cmd = app.add_subcommand("t2i", "Generate an image from a caption");
  t2i_cmd->add_option("--checkpoint", ti.checkpoint, "Checkpoint file")->required();
  t2i_cmd->add_option("--caption", ti.caption, "Caption text")->required();
  t2i_cmd->add_option("--steps", ti.steps, "Euler steps (default from checkpoint config, 28)");
  t2i_cmd->add_option("--guidance", ti.guidance, "Guidance scale (default from checkpoint config, 7.0)");
  t2i_cmd->add_flag("--no-guidance", ti.no_guidance, "Conditional branch only");
  t2i_cmd->add_option("--seed", ti.seed, "Sampling seed")->capture_default_str();
  t2i_cmd->add_option("--out", ti.out, "Output PPM path")->required();

  SampleArgs ca;
  auto* caption_cmd = app.add_subcommand("caption", "Caption an image");
  caption_cmd->add_option("--checkpoint", ca.checkpoint, "Checkpoint file")->required();
  caption_cmd->add_option("--image", ca.image, "Input PPM")->required();
  caption_cmd->add_option("--steps", ca.steps, "Unmasking steps (default from checkpoint config, 16)");
  caption_cmd->add_option("--seed", ca.seed, "Sampling seed")->capture_default_str();

  SampleArgs qa;
  auto* vqa_cmd = app.add_subcommand("vqa", "Answer a question about an image");
  vqa_cmd->add_option("--checkpoint", qa.checkpoint, "Checkpoint file")->required();
  vqa_cmd->add_option("--image", qa.image, "Input PPM")->required();
  vqa_cmd->add_option("--question", qa.question, "Question text, e.g. \"how many objects ?\"")->required();
  vqa_cmd->add_option("--steps", qa.steps, "Unmasking steps (default from checkpoint config, 16)");
  vqa_cmd->add_option("--seed", qa.seed, "Sampling seed")->capture_default_str();
  vqa_cmd->add_flag("--trace", qa.trace, "Print the model input at every step");

  RenderArgs re;
  auto* render_cmd = app.add_subcommand("render", "Render the scene a caption describes");
  render_cmd->add_option("--caption", re.caption, "Caption text")->required();
  render_cmd->add_option("--out", re.out, "Output PPM path")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Oracle-scored accuracy across sampling step counts");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset file (default: held-out examples)");
  eval_cmd->add_option("--examples", ev.examples, "Number of examples")->capture_default_str();
  eval_cmd->add_option("--data-seed", ev.data_seed, "Seed of the training data, for held-out examples")
      ->capture_default_str();
  eval_cmd->add_option("--steps", ev.steps, "Step counts T")->delimiter(',')->capture_default_str();
  eval_cmd->add_option("--seeds", ev.seeds, "Number of sampling seeds per T")->capture_default_str();
  eval_cmd->add_option("--seed", ev.seed, "First sampling seed")->capture_default_str();
  eval_cmd->add_option("--guidance", ev.guidance, "Guidance scale for T2I");
  eval_cmd->add_flag("--no-images", ev.no_images, "Skip text-to-image scoring");
  eval_cmd->add_option("--out", ev.out, "Write the JSON report here");

  VerifyArgs ve;
  auto* verify_cmd_ = app.add_subcommand("verify", "Run the oracle and invariant checks");
  verify_cmd_->add_option("--only", ve.only, "Run only this check (repeatable)");
  verify_cmd_->add_option("--inject", ve.inject, "Enable a deliberate defect: posterior_sign_flip, euler_sign_flip");
  verify_cmd_->add_flag("--list", ve.list, "List checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) return train(tr);
    if (*t2i_cmd) return t2i(ti);
    if (*caption_cmd) return caption(ca);
    if (*vqa_cmd) return vqa(qa);
    if (*render_cmd) return render(re);
    if (*eval_cmd) return eval(ev);
    if (*verify_cmd_) return verify_cmd(ve);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return numeric;
  } catch (const world::UnknownWordError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  }
  return usage;
}
