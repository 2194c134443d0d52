#include "ddit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ddit/binary_io.hpp"

namespace ddit {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config: bad value '" + std::string(v) + "' for key '" + std::string(key) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + std::string(v) + "' for key '" + std::string(key) + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(T RunConfig::*section, std::size_t T::*member) {
  return {[=](RunConfig& c, std::string_view v) { (c.*section).*member = parse_number<std::size_t>("", v); },
          [=](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}

template <typename T>
Field real_field(T RunConfig::*section, double T::*member) {
  return {[=](RunConfig& c, std::string_view v) { (c.*section).*member = parse_number<double>("", v); },
          [=](const RunConfig& c) { return fmt((c.*section).*member); }};
}

// Ordered so that to_text() groups keys by section.
const std::vector<std::pair<std::string, Field>>& fields() {
  using R = RunConfig;
  static const std::vector<std::pair<std::string, Field>> f = {
      {"model.depth", size_field(&R::model, &DDiTConfig::depth)},
      {"model.width", size_field(&R::model, &DDiTConfig::width)},
      {"model.heads", size_field(&R::model, &DDiTConfig::heads)},
      {"model.patch", size_field(&R::model, &DDiTConfig::patch)},
      {"model.image_height", {[](R& c, std::string_view v) { c.model.image.height = parse_number<std::size_t>("", v); },
                              [](const R& c) { return std::to_string(c.model.image.height); }}},
      {"model.image_width", {[](R& c, std::string_view v) { c.model.image.width = parse_number<std::size_t>("", v); },
                             [](const R& c) { return std::to_string(c.model.image.width); }}},
      {"model.image_channels", {[](R& c, std::string_view v) { c.model.image.channels = parse_number<std::size_t>("", v); },
                                [](const R& c) { return std::to_string(c.model.image.channels); }}},
      {"model.vocab", {[](R& c, std::string_view v) { c.model.vocab = parse_number<int>("", v); },
                       [](const R& c) { return std::to_string(c.model.vocab); }}},
      {"model.text_len", size_field(&R::model, &DDiTConfig::text_len)},
      {"model.mlp_ratio", size_field(&R::model, &DDiTConfig::mlp_ratio)},
      {"model.encoder_depth", size_field(&R::model, &DDiTConfig::encoder_depth)},
      {"model.time_dim", size_field(&R::model, &DDiTConfig::time_dim)},
      {"train.lambda_text", real_field(&R::train, &TrainConfig::lambda_text)},
      {"train.lr", real_field(&R::train, &TrainConfig::lr)},
      {"train.warmup_iters", size_field(&R::train, &TrainConfig::warmup_iters)},
      {"train.weight_decay", real_field(&R::train, &TrainConfig::weight_decay)},
      {"train.beta1", real_field(&R::train, &TrainConfig::beta1)},
      {"train.beta2", real_field(&R::train, &TrainConfig::beta2)},
      {"train.adam_eps", real_field(&R::train, &TrainConfig::adam_eps)},
      {"train.grad_clip", real_field(&R::train, &TrainConfig::grad_clip)},
      {"train.batch", size_field(&R::train, &TrainConfig::batch)},
      {"train.steps", size_field(&R::train, &TrainConfig::steps)},
      {"train.cond_dropout", real_field(&R::train, &TrainConfig::cond_dropout)},
      {"train.qa_fraction", real_field(&R::train, &TrainConfig::qa_fraction)},
      {"train.nelbo_k", size_field(&R::train, &TrainConfig::nelbo_k)},
      {"train.nelbo_delta", real_field(&R::train, &TrainConfig::nelbo_delta)},
      {"train.antithetic_per_example",
       {[](R& c, std::string_view v) { c.train.antithetic_per_example = parse_bool("train.antithetic_per_example", v); },
        [](const R& c) { return std::string(c.train.antithetic_per_example ? "true" : "false"); }}},
      {"train.image_timesteps", {[](R& c, std::string_view v) { c.train.image_timesteps = std::string(v); },
                                 [](const R& c) { return c.train.image_timesteps; }}},
      {"train.seed", {[](R& c, std::string_view v) { c.train.seed = parse_number<std::uint64_t>("", v); },
                      [](const R& c) { return std::to_string(c.train.seed); }}},
      {"train.eval_every", size_field(&R::train, &TrainConfig::eval_every)},
      {"train.eval_examples", size_field(&R::train, &TrainConfig::eval_examples)},
      {"train.checkpoint_every", size_field(&R::train, &TrainConfig::checkpoint_every)},
      {"sample.image_steps", size_field(&R::sample, &SampleConfig::image_steps)},
      {"sample.guidance", real_field(&R::sample, &SampleConfig::guidance)},
      {"sample.caption_steps", size_field(&R::sample, &SampleConfig::caption_steps)},
      {"sample.answer_steps", size_field(&R::sample, &SampleConfig::answer_steps)},
  };
  return f;
}

const Field& field(std::string_view key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("train config: " + why); };
  if (!(lambda_text >= 0.0)) fail("lambda_text must be >= 0");
  if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) fail("cond_dropout must lie in [0, 1)");
  if (warmup_iters > steps) fail("warmup_iters must not exceed steps");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (batch == 0) fail("batch must be positive");
  if (nelbo_k == 0) fail("nelbo_k must be positive");
  if (!(nelbo_delta > 0.0 && nelbo_delta < 1.0)) fail("nelbo_delta must lie in (0, 1)");
  if (!(qa_fraction >= 0.0 && qa_fraction <= 1.0)) fail("qa_fraction must lie in [0, 1]");
  if (image_timesteps != "logit_normal" && image_timesteps != "uniform") {
    fail("image_timesteps must be 'logit_normal' or 'uniform'");
  }
}

void SampleConfig::validate() const {
  if (image_steps == 0 || caption_steps == 0 || answer_steps == 0) {
    throw ConfigError("sample config: step counts must be positive");
  }
  if (!(guidance >= 0.0)) throw ConfigError("sample config: guidance must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  sample.validate();
}

void RunConfig::set(std::string_view dotted_key, std::string_view value) {
  const auto& f = field(dotted_key);
  try {
    f.set(*this, trim(value));
  } catch (const ConfigError&) {
    throw ConfigError("config: bad value '" + std::string(trim(value)) + "' for key '" + std::string(dotted_key) + "'");
  }
}

void RunConfig::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("config: expected key=value, got '" + std::string(assignment) + "'");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::string section;
  std::size_t line_no = 0;
  bool saw_version = false;
  std::istringstream is{std::string(text)};
  std::string raw;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "model" && section != "train" && section != "sample") {
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown section '" + section + "'");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (section.empty()) {
      if (key != "version") throw ConfigError("config: unknown key '" + std::string(key) + "'");
      if (parse_number<int>(key, value) != kVersion) throw ConfigError("config: unsupported version " + std::string(value));
      saw_version = true;
      continue;
    }
    cfg.set(section + "." + std::string(key), value);
  }
  if (!saw_version && line_no > 0 && !text.empty()) {
    // Files without a version line are accepted as version 1.
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "version = " << kVersion << "\n";
  std::string current;
  for (const auto& [k, f] : fields()) {
    const auto dot = k.find('.');
    const std::string section = k.substr(0, dot);
    if (section != current) {
      os << "\n[" << section << "]\n";
      current = section;
    }
    os << k.substr(dot + 1) << " = " << f.get(*this) << "\n";
  }
  return os.str();
}

std::uint64_t RunConfig::training_hash() const {
  std::string text;
  for (const auto& [k, f] : fields()) {
    if (k.rfind("sample.", 0) == 0) continue;
    if (k == "train.steps" || k == "train.eval_every" || k == "train.eval_examples" ||
        k == "train.checkpoint_every") {
      continue;
    }
    text += k + "=" + f.get(*this) + "\n";
  }
  return fnv1a64(text);
}

}  // namespace ddit
