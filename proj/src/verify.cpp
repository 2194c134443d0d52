#include "ddit/verify.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unistd.h>

#include "ddit/binary_io.hpp"
#include "ddit/checkpoint.hpp"
#include "ddit/dataset_io.hpp"
#include "ddit/grad_check.hpp"
#include "ddit/image_flow.hpp"
#include "ddit/sampling.hpp"
#include "ddit/stats.hpp"
#include "ddit/text_diffusion.hpp"
#include "ddit/trainer.hpp"
#include "ddit/world.hpp"

namespace ddit::verify {

DDiTConfig reference_config() {
  DDiTConfig c;
  c.depth = 1;
  c.width = 16;
  c.heads = 2;
  c.patch = 4;
  c.image = {8, 8, 3};
  c.vocab = 8;
  c.text_len = 6;
  c.mlp_ratio = 2;
  c.encoder_depth = 1;
  c.time_dim = 8;
  return c;
}

RunConfig tiny_world_config() {
  RunConfig c;
  c.model.depth = 1;
  c.model.width = 16;
  c.model.heads = 2;
  c.model.patch = 4;
  c.model.mlp_ratio = 2;
  c.model.encoder_depth = 1;
  c.model.time_dim = 8;
  c.train.batch = 4;
  c.train.steps = 10;
  c.train.warmup_iters = 2;
  c.train.lr = 1e-3;
  c.train.seed = 11;
  c.train.eval_every = 0;
  c.train.checkpoint_every = 5;
  return c;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------- gradients

std::vector<world::Example> reference_examples(const DDiTConfig& cfg, std::size_t count, Rng& rng) {
  const Vocab vocab = cfg.vocabulary();
  std::vector<world::Example> out(count);
  for (auto& ex : out) {
    ex.image = standard_normal_grid(cfg.image, rng);
    std::vector<int> ids(cfg.text_len);
    for (auto& id : ids) id = vocab.content_id(static_cast<int>(rng.below(vocab.size - 1)));
    ex.caption = TokenSequence(std::move(ids));
  }
  return out;
}

Outcome gradient_outcome(const FdReport& r) {
  Outcome o;
  o.passed = r.passed;
  o.values["max_rel_error"] = r.max_rel_error;
  o.values["entries"] = static_cast<double>(r.checked);
  o.detail = std::to_string(r.checked) + " entries, max relative error " + fmt(r.max_rel_error) + " at " +
             r.worst.name + "[" + std::to_string(r.worst.index) + "] (analytic " + fmt(r.worst.analytic) +
             ", numeric " + fmt(r.worst.numeric) + ")";
  return o;
}

Outcome check_grad_fm() {
  const auto cfg = reference_config();
  Rng rng(101);
  auto params = ModelParams::init(cfg, rng, InitMode::dense);
  auto exs = reference_examples(cfg, 2, rng);
  std::vector<ImageGrid> noisy;
  std::vector<double> target;
  const double ts[] = {0.3, 0.8};
  for (std::size_t b = 0; b < exs.size(); ++b) {
    const auto noise = standard_normal_grid(cfg.image, rng);
    noisy.push_back(interpolate(exs[b].image, noise, ts[b]));
    const auto tgt = patchify(velocity_target(exs[b].image, noise), cfg.patch);
    target.insert(target.end(), tgt.begin(), tgt.end());
  }
  auto build = [&](Tape& tape) {
    std::vector<BatchItem> items;
    for (std::size_t b = 0; b < exs.size(); ++b) items.push_back({&noisy[b], &exs[b].caption, ts[b]});
    return fm_loss(forward_batch(tape, params, cfg, items).velocity, target);
  };
  const auto named = params.named();
  return gradient_outcome(finite_difference_check(build, named));
}

Outcome check_grad_nelbo() {
  const auto cfg = reference_config();
  const Vocab vocab = cfg.vocabulary();
  Rng rng(202);
  auto params = ModelParams::init(cfg, rng, InitMode::dense);
  auto exs = reference_examples(cfg, 2, rng);
  const double ts[] = {0.4, 0.7};
  std::vector<TokenSequence> noisy;
  for (std::size_t b = 0; b < exs.size(); ++b) {
    TokenSequence n;
    do {
      n = forward_mask(exs[b].caption, vocab, ts[b], rng);
    } while (n.count(vocab.mask_id) == 0);
    noisy.push_back(std::move(n));
  }
  auto build = [&](Tape& tape) {
    std::vector<BatchItem> items;
    for (std::size_t b = 0; b < exs.size(); ++b) items.push_back({&exs[b].image, &noisy[b], 0.0});
    auto vars = forward_batch(tape, params, cfg, items);
    std::vector<NelboTerm> terms;
    for (std::size_t b = 0; b < exs.size(); ++b) {
      terms.push_back({slice(vars.text_logits, 0, b * cfg.text_len, (b + 1) * cfg.text_len), &exs[b].caption,
                       &noisy[b], ts[b]});
    }
    return nelbo_loss(terms, vocab).loss;
  };
  const auto named = params.named();
  return gradient_outcome(finite_difference_check(build, named));
}

Outcome check_grad_joint() {
  RunConfig rc;
  rc.model = reference_config();
  rc.train.cond_dropout = 0.5;
  Rng rng(303);
  auto params = ModelParams::init(rc.model, rng, InitMode::dense);
  auto exs = reference_examples(rc.model, 3, rng);
  std::vector<const world::Example*> batch;
  for (const auto& e : exs) batch.push_back(&e);
  // Draws are fixed once; the loss is then a deterministic function of the weights.
  const StepPlan plan = plan_step(batch, rc, 77);
  auto build = [&](Tape& tape) { return build_joint_loss(tape, params, rc.model, batch, plan, 1.0).total; };
  const auto named = params.named();
  return gradient_outcome(finite_difference_check(build, named));
}

// Full-size model, so only a strided sample of entries per tensor.
Outcome check_grad_joint_desk() {
  RunConfig rc;
  Rng rng(313);
  auto params = ModelParams::init(rc.model, rng, InitMode::dense);
  std::vector<world::Example> exs;
  for (int i = 0; i < 2; ++i) exs.push_back(world::generate_example(rng));
  std::vector<const world::Example*> batch;
  for (const auto& e : exs) batch.push_back(&e);
  const StepPlan plan = plan_step(batch, rc, 78);
  auto build = [&](Tape& tape) { return build_joint_loss(tape, params, rc.model, batch, plan, 1.0).total; };
  const auto named = params.named();
  FdOptions opts;
  opts.max_entries_per_tensor = 3;
  return gradient_outcome(finite_difference_check(build, named, opts));
}

// ---------------------------------------------------------------- masking laws

Outcome check_forward_marginal() {
  const Vocab vocab = world::vocab();
  const std::size_t L = world::kTextLen;
  Rng rng(404);
  auto random_seq = [&] {
    std::vector<int> ids(L);
    for (auto& id : ids) id = vocab.content_id(static_cast<int>(rng.below(vocab.size - 1)));
    return TokenSequence(std::move(ids));
  };
  Outcome o;
  o.passed = true;

  // Mask fraction at t = 0.5 over 1e5 positions.
  const std::size_t positions = 100000;
  std::size_t masked = 0, changed = 0;
  for (std::size_t n = 0; n < positions / L; ++n) {
    const auto x = random_seq();
    const auto z = forward_mask(x, vocab, 0.5, rng);
    for (std::size_t j = 0; j < L; ++j) {
      if (z.ids[j] == vocab.mask_id) ++masked;
      else if (z.ids[j] != x.ids[j]) ++changed;
    }
  }
  const double frac = static_cast<double>(masked) / static_cast<double>(positions / L * L);
  o.values["mask_fraction"] = frac;
  if (std::fabs(frac - 0.5) > 0.01 || changed != 0) o.passed = false;
  o.detail = "t=0.5 mask fraction " + fmt(frac);
  if (changed != 0) o.detail += ", " + std::to_string(changed) + " unmasked tokens changed value";

  // Per-sequence mask counts against Binomial(L, t).
  for (double t : {0.1, 0.9}) {
    std::vector<double> hist(L + 1, 0.0);
    for (std::size_t n = 0; n < positions / L; ++n) {
      const auto z = forward_mask(random_seq(), vocab, t, rng);
      hist[z.count(vocab.mask_id)] += 1.0;
    }
    const auto pmf = stats::binomial_pmf(L, t);
    const auto chi = stats::chi_square_test(hist, pmf);
    o.values["p_value_t" + fmt(t)] = chi.p_value;
    o.detail += "; t=" + fmt(t) + " chi2 " + fmt(chi.statistic) + " (dof " + fmt(chi.dof) + ", p " + fmt(chi.p_value) + ")";
    if (!(chi.p_value > 0.01)) o.passed = false;
  }
  return o;
}

Outcome check_posterior_consistency() {
  const Vocab vocab(4, 3);
  const std::size_t L = 3;
  const std::size_t draws = 10000;
  Rng rng(505);
  Outcome o;
  o.passed = true;
  const std::pair<double, double> pairs[] = {{0.8, 0.4}, {0.5, 0.1}};
  for (auto [t, s] : pairs) {
    std::vector<double> counts(64, 0.0);
    for (std::size_t n = 0; n < draws; ++n) {
      std::vector<int> ids(L);
      for (auto& id : ids) id = static_cast<int>(rng.below(3));
      const TokenSequence x0(ids);
      std::vector<double> onehot(L * 4, 0.0);
      for (std::size_t j = 0; j < L; ++j) onehot[j * 4 + static_cast<std::size_t>(ids[j])] = 1.0;
      const auto xt = forward_mask(x0, vocab, t, rng);
      const auto xs = posterior_step(xt, onehot, vocab, s, t, rng);
      std::size_t cat = 0;
      for (std::size_t j = 0; j < L; ++j) cat = cat * 4 + static_cast<std::size_t>(xs.ids[j]);
      counts[cat] += 1.0;
    }
    // Direct forward law at s with x0 uniform: mask w.p. s, each content id w.p. (1 - s)/3.
    std::vector<double> probs(64);
    for (std::size_t cat = 0; cat < 64; ++cat) {
      double p = 1.0;
      for (std::size_t j = 0, c = cat; j < L; ++j, c /= 4) p *= (c % 4 == 3) ? s : (1.0 - s) / 3.0;
      probs[cat] = p;
    }
    const auto chi = stats::chi_square_test(counts, probs);
    const std::string tag = "t" + fmt(t) + "_s" + fmt(s);
    o.values["p_value_" + tag] = chi.p_value;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += "t=" + fmt(t) + " -> s=" + fmt(s) + ": chi2 " + fmt(chi.statistic) + " (dof " + fmt(chi.dof) +
                ", p " + fmt(chi.p_value) + ")";
    if (!(chi.p_value > 0.01)) o.passed = false;
  }
  return o;
}

Outcome check_nelbo_enumeration() {
  const Vocab vocab(4, 3);
  const std::size_t L = 3;
  const std::size_t N = 4;
  Rng rng(606);
  const TokenSequence x0({0, 2, 1});
  // Fixed random predictor: one logit table per noisy state.
  std::vector<std::vector<double>> table(64, std::vector<double>(L * N));
  for (auto& row : table) {
    for (auto& v : row) v = 1.5 * rng.normal();
  }
  auto state_of = [&](const TokenSequence& z) {
    std::size_t c = 0;
    for (int id : z.ids) c = c * 4 + static_cast<std::size_t>(id);
    return c;
  };
  const auto times = antithetic_times({4, 1e-3}, 0.5);
  const double K = static_cast<double>(times.size());

  // Exhaustive expectation over mask patterns.
  double exact = 0.0;
  for (double t : times) {
    for (std::size_t pattern = 0; pattern < (1u << L); ++pattern) {
      TokenSequence z = x0;
      double p = 1.0;
      std::size_t m = 0;
      for (std::size_t j = 0; j < L; ++j) {
        if (pattern & (1u << j)) {
          z.ids[j] = vocab.mask_id;
          p *= t;
          ++m;
        } else {
          p *= 1.0 - t;
        }
      }
      if (m == 0) continue;
      const auto& logits = table[state_of(z)];
      double nll = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        if (z.ids[j] != vocab.mask_id) continue;
        const double* r = logits.data() + j * N;
        double mx = -1e300;
        for (std::size_t k = 0; k < 3; ++k) mx = std::max(mx, r[k]);
        double sum = 0.0;
        for (std::size_t k = 0; k < 3; ++k) sum += std::exp(r[k] - mx);
        nll -= r[x0.ids[j]] - mx - std::log(sum);
      }
      exact += p * (nll / static_cast<double>(m)) / t / K;
    }
  }

  const std::size_t draws = 100000;
  std::vector<double> est(draws);
  for (std::size_t n = 0; n < draws; ++n) {
    Tape tape;
    std::vector<TokenSequence> noisy;
    noisy.reserve(times.size());
    std::vector<NelboTerm> terms;
    for (double t : times) noisy.push_back(forward_mask(x0, vocab, t, rng));
    for (std::size_t i = 0; i < times.size(); ++i) {
      terms.push_back({tape.constant(Tensor({L, N}, table[state_of(noisy[i])])), &x0, &noisy[i], times[i]});
    }
    est[n] = nelbo_loss(terms, vocab).loss.item();
  }
  const double mean = stats::mean(est);
  const double se = std::sqrt(stats::variance(est) / static_cast<double>(draws));
  Outcome o;
  o.values["exact"] = exact;
  o.values["mc_mean"] = mean;
  o.values["z"] = (mean - exact) / se;
  o.passed = std::fabs(mean - exact) <= 3.0 * se;
  o.detail = "exhaustive " + fmt(exact) + ", Monte Carlo " + fmt(mean) + " +/- " + fmt(se) + " (z = " +
             fmt((mean - exact) / se) + ")";
  return o;
}

Outcome check_oracle_sampler() {
  const Vocab vocab = world::vocab();
  const std::size_t L = world::kTextLen;
  const auto n = static_cast<std::size_t>(vocab.size);
  Outcome o;
  o.passed = true;
  for (std::size_t T : {1, 4, 16}) {
    Rng rng(700 + T);
    std::size_t exact = 0;
    for (std::size_t i = 0; i < 1000; ++i) {
      std::vector<int> truth(L);
      for (auto& id : truth) id = vocab.content_id(static_cast<int>(rng.below(vocab.size - 1)));
      // Every fourth sequence keeps a frozen prefix, as in question infilling.
      const std::size_t prefix = (i % 4 == 0) ? 5 : 0;
      std::vector<int> init_ids(L, vocab.mask_id);
      std::vector<std::uint8_t> frozen(L, 0);
      for (std::size_t j = 0; j < prefix; ++j) {
        init_ids[j] = truth[j];
        frozen[j] = 1;
      }
      std::vector<double> onehot(L * n, 0.0);
      for (std::size_t j = 0; j < L; ++j) onehot[j * n + static_cast<std::size_t>(truth[j])] = 1.0;
      auto predictor = [&](const TokenSequence&) { return onehot; };
      const auto out = ancestral_sample(predictor, TokenSequence(init_ids, frozen), vocab, T, rng);
      if (out.ids == truth) ++exact;
    }
    o.values["exact_T" + std::to_string(T)] = static_cast<double>(exact);
    if (!o.detail.empty()) o.detail += ", ";
    o.detail += "T=" + std::to_string(T) + ": " + std::to_string(exact) + "/1000";
    if (exact != 1000) o.passed = false;
  }
  return o;
}

// ---------------------------------------------------------------- image sampler

Outcome check_cfg_identity() {
  const auto cfg = reference_config();
  Rng init(808);
  auto params = ModelParams::init(cfg, init, InitMode::dense);
  Rng data(809);
  const auto ex = reference_examples(cfg, 1, data).front();
  std::size_t uncond_calls = 0;
  const auto null_text = world::null_caption(cfg.text_len);
  VelocityFn counted = [&](const ImageGrid& x, double t, const TokenSequence& cond) {
    if (cond == null_text) ++uncond_calls;
    return predict(params, cfg, x, cond, t).velocity;
  };
  GuidanceConfig on{1.0, null_text, true};
  GuidanceConfig off{7.0, null_text, false};
  Rng a(42), b(42);
  const auto x_on = euler_sample(counted, ex.caption, cfg.image, 12, on, a);
  const std::size_t calls_on = uncond_calls;
  const auto x_off = euler_sample(counted, ex.caption, cfg.image, 12, off, b);
  const bool same = x_on.values.size() == x_off.values.size() &&
                    std::memcmp(x_on.values.data(), x_off.values.data(), x_on.values.size() * sizeof(double)) == 0;
  Outcome o;
  o.passed = same && calls_on == 0 && uncond_calls == 0;
  o.detail = std::string(same ? "s=1 and unguided samples bit-identical" : "s=1 and unguided samples differ") +
             ", unconditional evaluations " + std::to_string(uncond_calls);
  return o;
}

Outcome check_euler_convergence() {
  const GridShape shape{2, 2, 3};
  Rng rng(909);
  const auto x1 = standard_normal_grid(shape, rng);
  VelocityFn v = [](const ImageGrid& x, double, const TokenSequence&) {
    ImageGrid out(x.shape);
    for (std::size_t i = 0; i < x.values.size(); ++i) out.values[i] = -x.values[i];
    return out;
  };
  GuidanceConfig none{1.0, {}, false};
  const std::size_t Ts[] = {16, 32, 64, 128};
  std::vector<double> lx, ly;
  Outcome o;
  for (auto T : Ts) {
    const auto x0 = euler_integrate(v, TokenSequence{}, x1, T, none);
    double err = 0.0;
    for (std::size_t i = 0; i < x0.values.size(); ++i) {
      err = std::max(err, std::fabs(x0.values[i] - std::numbers::e * x1.values[i]));
    }
    lx.push_back(std::log(static_cast<double>(T)));
    ly.push_back(std::log(err));
    o.values["error_T" + std::to_string(T)] = err;
  }
  double mx = stats::mean(lx), my = stats::mean(ly), sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double slope = sxy / sxx;
  o.values["slope"] = slope;
  o.passed = slope >= -1.2 && slope <= -0.8;
  o.detail = "log-log slope " + fmt(slope) + " over T in {16, 32, 64, 128}";
  return o;
}

// ---------------------------------------------------------------- variance

Outcome check_antithetic_variance() {
  const auto cfg = reference_config();
  const Vocab vocab = cfg.vocabulary();
  Rng init(1010);
  auto params = ModelParams::init(cfg, init);
  const auto ex = reference_examples(cfg, 1, init).front();
  const std::size_t K = 4;
  const double delta = 1e-3;
  const std::size_t reps = 1000;

  auto estimate = [&](const std::vector<double>& times, Rng& rng) {
    std::vector<TokenSequence> noisy;
    noisy.reserve(times.size());
    for (double t : times) noisy.push_back(forward_mask(ex.caption, vocab, t, rng));
    std::vector<BatchItem> items;
    for (const auto& z : noisy) items.push_back({&ex.image, &z, 0.0});
    Tape tape;
    auto vars = forward_batch(tape, params, cfg, items);
    std::vector<NelboTerm> terms;
    for (std::size_t i = 0; i < times.size(); ++i) {
      terms.push_back({slice(vars.text_logits, 0, i * cfg.text_len, (i + 1) * cfg.text_len), &ex.caption,
                       &noisy[i], times[i]});
    }
    return nelbo_loss(terms, vocab).loss.item();
  };

  Rng rs(1011), ri(1012);
  std::vector<double> strat(reps), iid(reps);
  for (std::size_t r = 0; r < reps; ++r) {
    strat[r] = estimate(antithetic_times({K, delta}, rs.uniform()), rs);
    std::vector<double> times(K);
    for (auto& t : times) t = delta + (1.0 - delta) * ri.uniform();
    iid[r] = estimate(times, ri);
  }
  const double vs = stats::variance(strat), vi = stats::variance(iid);
  Outcome o;
  o.values["var_stratified"] = vs;
  o.values["var_iid"] = vi;
  o.values["ratio"] = vs / vi;
  o.passed = vs <= 1.05 * vi;
  o.detail = "variance stratified " + fmt(vs) + " vs i.i.d. " + fmt(vi) + " (ratio " + fmt(vs / vi) + ", K = 4, " +
             std::to_string(reps) + " replications)";
  return o;
}

// ---------------------------------------------------------------- world

Outcome check_render_roundtrip() {
  Rng rng(1111);
  std::size_t exact = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto scene = world::random_scene(rng);
    if (world::decode_grid(world::render(scene)).scene == scene) ++exact;
  }
  std::size_t robust = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto scene = world::random_scene(rng);
    auto img = world::render(scene);
    for (auto& v : img.values) v += 0.1 * rng.normal();
    if (world::decode_grid(img).scene == scene) ++robust;
  }
  const auto empty = world::decode_grid(ImageGrid(world::kGridShape));
  Outcome o;
  o.values["clean_exact"] = static_cast<double>(exact);
  o.values["noisy_exact"] = static_cast<double>(robust);
  o.passed = exact == 10000 && robust >= 990 && empty.scene.objects.empty();
  o.detail = "clean " + std::to_string(exact) + "/10000, sigma=0.1 " + std::to_string(robust) + "/1000, zero grid " +
             (empty.scene.objects.empty() ? "empty" : "not empty");
  return o;
}

Outcome check_grammar_roundtrip() {
  Rng rng(1212);
  std::size_t ok = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto scene = world::random_scene(rng);
    const auto cap = world::caption_tokens(scene);
    const auto parsed = world::parse_caption(cap.ids);
    std::vector<int> content;
    for (int id : cap.ids) {
      if (id != world::tok::pad) content.push_back(id);
    }
    if (parsed && *parsed == scene && world::tokenize(world::detokenize(cap.ids)) == content) ++ok;
  }
  Outcome o;
  o.passed = ok == 10000;
  o.detail = std::to_string(ok) + "/10000 captions invert exactly";
  return o;
}

// ---------------------------------------------------------------- persistence

std::filesystem::path scratch_dir(const std::string& tag) {
  static int counter = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("ddit-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Outcome check_dataset_roundtrip() {
  const auto a = generate_dataset(300, 7);
  const auto b = generate_dataset(300, 7);
  const auto bytes_a = encode_dataset(a);
  const auto bytes_b = encode_dataset(b);
  const auto dir = scratch_dir("data");
  const auto path = (dir / "data.bin").string();
  write_dataset(path, a);
  const auto back = read_dataset(path);
  const auto bytes_back = encode_dataset(back);
  bool grids = back.examples.size() == a.examples.size();
  for (std::size_t i = 0; grids && i < a.examples.size(); ++i) {
    grids = back.examples[i].image == a.examples[i].image && back.examples[i].scene == a.examples[i].scene &&
            back.examples[i].caption == a.examples[i].caption && back.examples[i].qa.size() == a.examples[i].qa.size();
  }
  std::filesystem::remove_all(dir);
  Outcome o;
  o.passed = bytes_a == bytes_b && bytes_back == bytes_a && grids;
  o.detail = std::string(bytes_a == bytes_b ? "same seed gives identical bytes" : "same seed gives different bytes") +
             ", file round trip " + (bytes_back == bytes_a && grids ? "bit-exact" : "differs");
  return o;
}

Outcome check_checkpoint_roundtrip() {
  const auto cfg = tiny_world_config();
  const auto data = generate_dataset(16, 3);
  auto state = TrainState::fresh(cfg);
  std::vector<const world::Example*> batch;
  for (std::size_t i = 0; i < cfg.train.batch; ++i) batch.push_back(&data.examples[i]);
  joint_step(batch, state.params, state.optimizer, cfg, 5);
  state.step = 1;
  const auto ck = state.to_checkpoint(cfg, data.fingerprint());
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  const auto again = encode_checkpoint(back);
  bool values = true;
  for (const auto& [name, t] : ck.params.tensors()) {
    const auto& u = back.params.at(name);
    values = values && t.shape() == u.shape() &&
             std::memcmp(t.values().data(), u.values().data(), t.size() * sizeof(double)) == 0;
  }
  values = values && back.optimizer == ck.optimizer && back.rng_state == ck.rng_state && back.config == ck.config;
  bool corrupt_detected = false;
  auto damaged = bytes;
  damaged[damaged.size() / 2] ^= 0x01;
  try {
    decode_checkpoint(damaged);
  } catch (const FormatError&) {
    corrupt_detected = true;
  }
  Outcome o;
  o.passed = again == bytes && values && corrupt_detected;
  o.detail = std::string(again == bytes && values ? "checkpoint round trip bit-exact" : "checkpoint round trip differs") +
             (corrupt_detected ? ", corruption detected" : ", corruption NOT detected");
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome check_resume_determinism() {
  const auto cfg = tiny_world_config();
  const auto data = generate_dataset(64, 5);
  const auto dir_a = scratch_dir("full");
  const auto dir_b = scratch_dir("resume");
  const auto dir_c = scratch_dir("repeat");

  TrainOptions oa;
  oa.out_dir = dir_a.string();
  auto a = TrainState::fresh(cfg);
  run_training(cfg, data, a, oa);

  TrainOptions oc;
  oc.out_dir = dir_c.string();
  auto c = TrainState::fresh(cfg);
  run_training(cfg, data, c, oc);

  TrainOptions ob;
  ob.out_dir = dir_b.string();
  ob.stop_after = 5;
  {
    auto b = TrainState::fresh(cfg);
    run_training(cfg, data, b, ob);
  }
  auto b = TrainState::from_checkpoint(load_checkpoint((dir_b / "checkpoint.bin").string()));
  ob.stop_after = 0;
  run_training(cfg, data, b, ob);

  const bool same_log = slurp(dir_a / "metrics.jsonl") == slurp(dir_b / "metrics.jsonl");
  const bool same_ck = slurp(dir_a / "checkpoint.bin") == slurp(dir_b / "checkpoint.bin");
  const bool repeat = slurp(dir_a / "metrics.jsonl") == slurp(dir_c / "metrics.jsonl") &&
                      slurp(dir_a / "checkpoint.bin") == slurp(dir_c / "checkpoint.bin");
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
  std::filesystem::remove_all(dir_c);
  Outcome o;
  o.passed = same_log && same_ck && repeat;
  o.detail = std::string("resumed at step 5: metrics ") + (same_log ? "identical" : "differ") + ", final checkpoint " +
             (same_ck ? "identical" : "differs") + "; repeated run " + (repeat ? "identical" : "differs");
  return o;
}

Outcome check_tape_replay() {
  const auto cfg = reference_config();
  Rng rng(1313);
  auto params = ModelParams::init(cfg, rng, InitMode::dense);
  const auto ex = reference_examples(cfg, 1, rng).front();
  Tape tape;
  auto out = forward(tape, params, cfg, ex.image, ex.caption, 0.6);
  Var loss = add(mean(sum_of_squares(out.velocity)), mean(out.text_logits));
  const double before = loss.item();
  auto copy = Tape::deserialize(tape.serialize());
  copy.replay();
  const double after = copy.value(loss.id())[0];
  copy.backward(copy.var(loss.id()));
  Outcome o;
  o.passed = before == after && copy.size() == tape.size();
  o.detail = std::to_string(tape.size()) + " nodes; replayed loss " + (before == after ? "bit-identical" : "differs");
  return o;
}

// ---------------------------------------------------------------- optimizer and step

Outcome check_adamw_rule() {
  Outcome o;
  o.passed = true;
  auto scalar_params = [](double p, double g) {
    ModelParams ps;
    ps.add("p", Tensor({1}, {p}));
    ps.at("p").ensure_grad();
    ps.at("p").grad()[0] = g;
    return ps;
  };
  {
    auto ps = scalar_params(1.0, 1.0);
    auto st = AdamState::zeros_like(ps);
    adamw_update(ps, st, {0.1, 0.9, 0.999, 1e-8, 0.0, 0});
    const double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    const double got = ps.at("p")[0];
    o.values["single_step"] = got;
    if (std::fabs(got - expect) > 1e-15) o.passed = false;
    o.detail = "p=1,g=1,lr=0.1 -> " + fmt(got);
  }
  {
    auto ps = scalar_params(2.0, 0.0);
    auto st = AdamState::zeros_like(ps);
    adamw_update(ps, st, {0.1, 0.9, 0.999, 1e-8, 0.01, 0});
    const double got = ps.at("p")[0];
    if (got != 2.0 * (1.0 - 0.1 * 0.01)) o.passed = false;
    o.detail += ", zero-gradient decay " + fmt(got);
  }
  double prev = 0.0;
  for (std::size_t s = 1; s <= 30; ++s) {
    const double lr = warmup_lr(1.0, s, 20);
    if (lr < prev) o.passed = false;
    prev = lr;
  }
  if (warmup_lr(1.0, 20, 20) != 1.0 || warmup_lr(1.0, 25, 20) != 1.0) o.passed = false;
  o.detail += ", warmup multiplier " + fmt(warmup_lr(1.0, 20, 20)) + " at the last warmup step";
  return o;
}

Outcome check_joint_step() {
  auto cfg = tiny_world_config();
  const auto data = generate_dataset(8, 9);
  std::vector<const world::Example*> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back(&data.examples[i]);
  Outcome o;
  o.passed = true;

  // lambda = 0 matches an image-only step bit for bit.
  cfg.train.lambda_text = 0.0;
  auto a = TrainState::fresh(cfg);
  auto b = TrainState::fresh(cfg);
  joint_step(batch, a.params, a.optimizer, cfg, 99);
  StepOptions image_only;
  image_only.text_loss = false;
  joint_step(batch, b.params, b.optimizer, cfg, 99, image_only);
  bool identical = true;
  for (const auto& [name, t] : a.params.tensors()) {
    const auto& u = b.params.at(name);
    identical = identical && std::memcmp(t.values().data(), u.values().data(), t.size() * sizeof(double)) == 0;
  }
  if (!identical) o.passed = false;
  o.detail = std::string("lambda=0 update ") + (identical ? "bit-identical" : "differs") + " to image-only";

  // Reported total equals L_image + lambda * L_text.
  cfg.train.lambda_text = 0.7;
  auto c = TrainState::fresh(cfg);
  const auto r = joint_step(batch, c.params, c.optimizer, cfg, 100);
  const double gap = std::fabs(r.total - (r.image + 0.7 * r.text));
  o.values["additivity_gap"] = gap;
  if (gap > 1e-12) o.passed = false;
  o.detail += ", additivity gap " + fmt(gap);

  // With the image term dropped the gradient is lambda times the text gradient.
  RunConfig rc = cfg;
  auto d = TrainState::fresh(rc);
  StepPlan plan = plan_step(batch, rc, 101);
  plan.image.clear();
  d.params.zero_grad();
  {
    Tape tape;
    tape.backward(build_joint_loss(tape, d.params, rc.model, batch, plan, 0.7).total);
  }
  std::map<std::string, std::vector<double>> scaled;
  for (auto& [name, t] : d.params.tensors()) scaled[name].assign(t.grad().begin(), t.grad().end());
  d.params.zero_grad();
  {
    Tape tape;
    tape.backward(build_joint_loss(tape, d.params, rc.model, batch, plan, 1.0).total);
  }
  double worst = 0.0;
  for (auto& [name, t] : d.params.tensors()) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      worst = std::max(worst, std::fabs(scaled[name][i] - 0.7 * t.grad()[i]));
    }
  }
  if (worst > 1e-12) o.passed = false;
  o.detail += ", text-only gradient scaling error " + fmt(worst);
  return o;
}

}  // namespace

const std::vector<Check>& registry() {
  static const std::vector<Check> checks = {
      {"grad_fm", "finite differences vs tape gradients, flow-matching loss, all parameters", check_grad_fm},
      {"grad_nelbo", "finite differences vs tape gradients, masked-diffusion loss, all parameters", check_grad_nelbo},
      {"grad_joint", "finite differences vs tape gradients, joint loss with frozen draws", check_grad_joint},
      {"grad_joint_desk", "finite differences vs tape gradients, joint loss, desk-size model, sampled entries",
       check_grad_joint_desk},
      {"forward_marginal", "forward masking matches the alpha(t) = 1 - t marginal", check_forward_marginal},
      {"posterior_consistency", "forward to t then posterior to s matches forward to s", check_posterior_consistency},
      {"nelbo_enumeration", "Monte Carlo NELBO mean matches exhaustive expectation", check_nelbo_enumeration},
      {"oracle_sampler", "ancestral sampling with the true predictor reconstructs exactly", check_oracle_sampler},
      {"cfg_identity", "guidance scale 1 equals the unguided sampler bit for bit", check_cfg_identity},
      {"euler_convergence", "Euler global error is first order on v = -x", check_euler_convergence},
      {"antithetic_variance", "stratified timesteps do not inflate estimator variance", check_antithetic_variance},
      {"render_roundtrip", "grid decoder inverts the renderer, also under noise", check_render_roundtrip},
      {"grammar_roundtrip", "caption grammar inverts exactly", check_grammar_roundtrip},
      {"dataset_roundtrip", "dataset generation is deterministic and files round-trip", check_dataset_roundtrip},
      {"checkpoint_roundtrip", "checkpoint files round-trip bit-exactly", check_checkpoint_roundtrip},
      {"resume_determinism", "resumed training matches the uninterrupted run", check_resume_determinism},
      {"tape_replay", "serialized tapes replay to identical values", check_tape_replay},
      {"adamw_rule", "AdamW update, decoupled decay and warmup", check_adamw_rule},
      {"joint_step", "joint step degeneracies and loss additivity", check_joint_step},
  };
  return checks;
}

const Check& find(const std::string& name) {
  for (const auto& c : registry()) {
    if (c.name == name) return c;
  }
  std::string known;
  for (const auto& c : registry()) known += (known.empty() ? "" : ", ") + c.name;
  throw std::invalid_argument("unknown check '" + name + "' (known: " + known + ")");
}

Report run_one(const Check& check) {
  Report r;
  r.name = check.name;
  const auto start = std::chrono::steady_clock::now();
  try {
    r.outcome = check.run();
  } catch (const std::exception& e) {
    r.outcome.passed = false;
    r.outcome.detail = std::string("raised: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<Report> run(std::span<const std::string> only, const std::function<void(const Report&)>& on_done) {
  std::vector<const Check*> todo;
  if (only.empty()) {
    for (const auto& c : registry()) todo.push_back(&c);
  } else {
    for (const auto& name : only) todo.push_back(&find(name));
  }
  std::vector<Report> out;
  for (const auto* c : todo) {
    out.push_back(run_one(*c));
    if (on_done) on_done(out.back());
  }
  return out;
}

}  // namespace ddit::verify
