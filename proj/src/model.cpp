#include "ddit/model.hpp"

#include <array>
#include <cmath>
#include <string>

namespace ddit {
namespace {

std::string key(const std::string& prefix, const char* leaf) { return prefix + "." + leaf; }

Var modulate(Var normed, Var shift, Var scale_row) {
  return add(add(multiply(normed, scale_row), normed), shift);
}

// Multi-head scaled dot-product attention without a causal mask.
Var attention(Var q, Var k, Var v, std::size_t heads) {
  const std::size_t width = q.shape()[1];
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice(q, 1, h * dh, (h + 1) * dh);
    Var kh = slice(k, 1, h * dh, (h + 1) * dh);
    Var vh = slice(v, 1, h * dh, (h + 1) * dh);
    Var weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    outs.push_back(matmul(weights, vh));
  }
  return heads == 1 ? outs[0] : concat(outs, 1);
}

struct Projections {
  Var q, k, v;
};

Projections project_qkv(Tape& tape, ModelParams& p, const std::string& prefix, Var x, std::size_t width) {
  Var qkv = linear(x, tape.parameter(p.at(key(prefix, "qkv.w"))), tape.parameter(p.at(key(prefix, "qkv.b"))));
  return {slice(qkv, 1, 0, width), slice(qkv, 1, width, 2 * width), slice(qkv, 1, 2 * width, 3 * width)};
}

Var mlp(Tape& tape, ModelParams& p, const std::string& prefix, Var x) {
  Var h = gelu(linear(x, tape.parameter(p.at(key(prefix, "fc1.w"))), tape.parameter(p.at(key(prefix, "fc1.b")))));
  return linear(h, tape.parameter(p.at(key(prefix, "fc2.w"))), tape.parameter(p.at(key(prefix, "fc2.b"))));
}

Var out_proj(Tape& tape, ModelParams& p, const std::string& prefix, Var x) {
  return linear(x, tape.parameter(p.at(key(prefix, "out.w"))), tape.parameter(p.at(key(prefix, "out.b"))));
}

// Six modulation rows: shift/scale/gate for attention, then for the MLP.
std::array<Var, 6> split_modulation(Var rows, std::size_t width) {
  std::array<Var, 6> m;
  for (std::size_t i = 0; i < 6; ++i) m[i] = slice(rows, 1, i * width, (i + 1) * width);
  return m;
}

void check_tokens(const DDiTConfig& cfg, const TokenSequence& tokens) {
  if (tokens.size() != cfg.text_len) {
    throw ShapeError("text sequence has " + std::to_string(tokens.size()) + " tokens, config expects " +
                     std::to_string(cfg.text_len));
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= cfg.vocab) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg.vocab));
    }
  }
}

}  // namespace

void DDiTConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("model config: " + why); };
  if (depth == 0) fail("depth must be positive");
  if (width == 0 || heads == 0) fail("width and heads must be positive");
  if (width % heads != 0) fail("width must be divisible by heads");
  if (patch == 0) fail("patch must be positive");
  if (image.height == 0 || image.width == 0 || image.channels == 0) fail("image extents must be positive");
  if (image.height % patch != 0 || image.width % patch != 0) fail("image height and width must be divisible by patch");
  if (vocab < 3) fail("vocab must hold at least two content tokens plus the mask");
  if (text_len == 0) fail("text_len must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (time_dim < 2 || time_dim % 2 != 0) fail("time_dim must be even and at least 2");
}

std::size_t param_count(const DDiTConfig& cfg) {
  const std::size_t w = cfg.width;
  const std::size_t h = cfg.width * cfg.mlp_ratio;
  const std::size_t n = static_cast<std::size_t>(cfg.vocab);
  const std::size_t pd = cfg.patch_dim();
  const std::size_t encoder_block = 4 * w * w + 2 * w * h + 9 * w + h;
  const std::size_t stream = 4 * w * w + 2 * w * h + 5 * w + h;
  const std::size_t block = 2 * stream + (6 * w * w + 6 * w) + 6 * w;
  return n * w + cfg.text_len * w                      // token + text positions
         + cfg.encoder_depth * encoder_block           //
         + pd * w + w + cfg.image_tokens() * w         // patch embedding + image positions
         + cfg.time_dim * w + w + w * w + w            // timestep MLP
         + cfg.depth * block                           //
         + 2 * w * w + 2 * w + w * pd + pd             // final image modulation + head
         + 2 * w + w * n + n;                          // final text norm + head
}

// ---------------------------------------------------------------- params

void ModelParams::add(std::string name, Tensor t) {
  if (!tensors_.emplace(std::move(name), std::move(t)).second) {
    throw std::logic_error("ModelParams: duplicate parameter path");
  }
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

std::vector<NamedTensor> ModelParams::named() {
  std::vector<NamedTensor> out;
  out.reserve(tensors_.size());
  for (auto& [name, t] : tensors_) out.push_back({name, &t});
  return out;
}

ModelParams ModelParams::init(const DDiTConfig& cfg, Rng& rng, InitMode mode) {
  cfg.validate();
  const bool dense = mode == InitMode::dense;
  const std::size_t w = cfg.width;
  const std::size_t h = cfg.width * cfg.mlp_ratio;
  const std::size_t pd = cfg.patch_dim();
  const auto n = static_cast<std::size_t>(cfg.vocab);
  ModelParams p;

  auto normal = [&](Shape s, double stddev) {
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = stddev * rng.normal();
    return t;
  };
  auto weight = [&](std::size_t in, std::size_t out) {
    return normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  auto bias = [&](std::size_t out) { return dense ? normal({1, out}, 0.1) : Tensor({1, out}); };
  auto gain = [&](std::size_t width) {
    Tensor t = Tensor::filled({width}, 1.0);
    if (dense) for (auto& v : t.values()) v += 0.1 * rng.normal();
    return t;
  };
  auto offset = [&](std::size_t width) { return dense ? normal({width}, 0.1) : Tensor({width}); };
  // Zero in standard mode so AdaLN gates and the velocity head start closed.
  auto zero_or_weight = [&](std::size_t in, std::size_t out) { return dense ? weight(in, out) : Tensor({in, out}); };

  auto attn_mlp = [&](const std::string& attn, const std::string& ff) {
    p.add(attn + ".qkv.w", weight(w, 3 * w));
    p.add(attn + ".qkv.b", bias(3 * w));
    p.add(attn + ".out.w", weight(w, w));
    p.add(attn + ".out.b", bias(w));
    p.add(ff + ".fc1.w", weight(w, h));
    p.add(ff + ".fc1.b", bias(h));
    p.add(ff + ".fc2.w", weight(h, w));
    p.add(ff + ".fc2.b", bias(w));
  };

  p.add("tok_emb", normal({n, w}, 0.02 * (dense ? 25.0 : 1.0)));
  p.add("txt_pos", normal({cfg.text_len, w}, 0.02 * (dense ? 25.0 : 1.0)));
  for (std::size_t i = 0; i < cfg.encoder_depth; ++i) {
    const std::string e = "enc." + std::to_string(i);
    p.add(e + ".ln1.g", gain(w));
    p.add(e + ".ln1.b", offset(w));
    p.add(e + ".ln2.g", gain(w));
    p.add(e + ".ln2.b", offset(w));
    attn_mlp(e + ".attn", e + ".mlp");
  }

  p.add("img.patch.w", weight(pd, w));
  p.add("img.patch.b", bias(w));
  p.add("img_pos", normal({cfg.image_tokens(), w}, 0.02 * (dense ? 25.0 : 1.0)));
  p.add("time.fc1.w", weight(cfg.time_dim, w));
  p.add("time.fc1.b", bias(w));
  p.add("time.fc2.w", weight(w, w));
  p.add("time.fc2.b", bias(w));

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = "blk." + std::to_string(i);
    p.add(b + ".ada.w", zero_or_weight(w, 6 * w));
    p.add(b + ".ada.b", dense ? normal({1, 6 * w}, 0.1) : Tensor({1, 6 * w}));
    Tensor mod({1, 6 * w});
    for (std::size_t j = 0; j < 6 * w; ++j) {
      const bool is_gate = (j / w) == 2 || (j / w) == 5;
      mod[j] = (is_gate ? 1.0 : 0.0) + (dense ? 0.1 * rng.normal() : 0.0);
    }
    p.add(b + ".txt.mod", std::move(mod));
    attn_mlp(b + ".img", b + ".img");
    attn_mlp(b + ".txt", b + ".txt");
  }

  p.add("final.ada.w", zero_or_weight(w, 2 * w));
  p.add("final.ada.b", dense ? normal({1, 2 * w}, 0.1) : Tensor({1, 2 * w}));
  p.add("final.img.w", zero_or_weight(w, pd));
  p.add("final.img.b", bias(pd));
  p.add("final.txt_ln.g", gain(w));
  p.add("final.txt_ln.b", offset(w));
  p.add("final.txt.w", weight(w, n));
  p.add("final.txt.b", bias(n));
  return p;
}

// ---------------------------------------------------------------- patches

std::vector<double> patchify(const ImageGrid& img, std::size_t patch) {
  const auto& s = img.shape;
  if (patch == 0 || s.height % patch != 0 || s.width % patch != 0) {
    throw ConfigError("patchify: image " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                      " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = s.height / patch, gw = s.width / patch;
  const std::size_t dim = patch * patch * s.channels;
  std::vector<double> out(gh * gw * dim);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      double* tok = out.data() + (py * gw + px) * dim;
      for (std::size_t dy = 0; dy < patch; ++dy) {
        for (std::size_t dx = 0; dx < patch; ++dx) {
          for (std::size_t c = 0; c < s.channels; ++c) {
            *tok++ = img.at(py * patch + dy, px * patch + dx, c);
          }
        }
      }
    }
  }
  return out;
}

ImageGrid unpatchify(std::span<const double> tokens, GridShape shape, std::size_t patch) {
  if (patch == 0 || shape.height % patch != 0 || shape.width % patch != 0) {
    throw ConfigError("unpatchify: shape not divisible by patch " + std::to_string(patch));
  }
  if (tokens.size() != shape.size()) throw ShapeError("unpatchify: token values do not fill the grid");
  ImageGrid img(shape);
  const std::size_t gh = shape.height / patch, gw = shape.width / patch;
  const std::size_t dim = patch * patch * shape.channels;
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      const double* tok = tokens.data() + (py * gw + px) * dim;
      for (std::size_t dy = 0; dy < patch; ++dy) {
        for (std::size_t dx = 0; dx < patch; ++dx) {
          for (std::size_t c = 0; c < shape.channels; ++c) {
            img.at(py * patch + dy, px * patch + dx, c) = *tok++;
          }
        }
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------- forward

std::vector<double> timestep_embedding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::cos(1000.0 * t * freq);
    out[half + i] = std::sin(1000.0 * t * freq);
  }
  return out;
}

namespace {

// Row ids selecting, for every row of a batch, the row of a per-example or
// per-position table.
std::vector<int> repeat_ids(std::size_t batch, std::size_t rows_each, bool by_example) {
  std::vector<int> ids(batch * rows_each);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ids[i] = static_cast<int>(by_example ? i / rows_each : i % rows_each);
  }
  return ids;
}

// Per-example attention over row blocks of a stacked batch. Rows
// [b*nq, (b+1)*nq) of q attend to rows [b*nk, (b+1)*nk) of k and v.
Var batched_attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads) {
  if (batch == 1) return attention(q, k, v, heads);
  const std::size_t nq = q.shape()[0] / batch;
  const std::size_t nk = k.shape()[0] / batch;
  std::vector<Var> outs;
  outs.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    outs.push_back(attention(slice(q, 0, b * nq, (b + 1) * nq), slice(k, 0, b * nk, (b + 1) * nk),
                             slice(v, 0, b * nk, (b + 1) * nk), heads));
  }
  return concat(outs, 0);
}

Var rows_of(Var x, std::size_t b, std::size_t rows) { return slice(x, 0, b * rows, (b + 1) * rows); }

Var encode_batch(Tape& tape, ModelParams& params, const DDiTConfig& cfg, std::span<const BatchItem> items) {
  std::vector<int> ids;
  ids.reserve(items.size() * cfg.text_len);
  for (const auto& it : items) {
    check_tokens(cfg, *it.text);
    ids.insert(ids.end(), it.text->ids.begin(), it.text->ids.end());
  }
  Var pos = tape.parameter(params.at("txt_pos"));
  if (items.size() > 1) pos = embedding_lookup(pos, repeat_ids(items.size(), cfg.text_len, false));
  Var x = add(embedding_lookup(tape.parameter(params.at("tok_emb")), ids), pos);
  for (std::size_t i = 0; i < cfg.encoder_depth; ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    Var h = layer_norm(x, tape.parameter(params.at(key(prefix, "ln1.g"))), tape.parameter(params.at(key(prefix, "ln1.b"))));
    auto qkv = project_qkv(tape, params, prefix + ".attn", h, cfg.width);
    x = add(x, out_proj(tape, params, prefix + ".attn", batched_attention(qkv.q, qkv.k, qkv.v, items.size(), cfg.heads)));
    h = layer_norm(x, tape.parameter(params.at(key(prefix, "ln2.g"))), tape.parameter(params.at(key(prefix, "ln2.b"))));
    x = add(x, mlp(tape, params, prefix + ".mlp", h));
  }
  return x;
}

}  // namespace

Var text_encode(Tape& tape, ModelParams& params, const DDiTConfig& cfg, const TokenSequence& tokens) {
  const ImageGrid* none = nullptr;
  const BatchItem item{none, &tokens, 0.0};
  return encode_batch(tape, params, cfg, std::span<const BatchItem>(&item, 1));
}

DualVars forward_batch(Tape& tape, ModelParams& params, const DDiTConfig& cfg, std::span<const BatchItem> items,
                       const ForwardOptions& opts) {
  if (items.empty()) throw std::invalid_argument("forward: empty batch");
  const std::size_t B = items.size();
  const std::size_t w = cfg.width;
  const std::size_t n_img = cfg.image_tokens();
  const std::size_t L = cfg.text_len;
  auto P = [&](const std::string& name) { return tape.parameter(params.at(name)); };

  std::vector<double> patch_rows;
  std::vector<double> temb_rows;
  patch_rows.reserve(B * n_img * cfg.patch_dim());
  temb_rows.reserve(B * cfg.time_dim);
  for (const auto& it : items) {
    if (it.image == nullptr || !(it.image->shape == cfg.image)) {
      throw ShapeError("forward: image shape does not match config");
    }
    if (!(it.t >= 0.0 && it.t <= 1.0)) throw std::out_of_range("forward: t_img outside [0, 1]");
    const auto p = patchify(*it.image, cfg.patch);
    patch_rows.insert(patch_rows.end(), p.begin(), p.end());
    const auto e = timestep_embedding(it.t, cfg.time_dim);
    temb_rows.insert(temb_rows.end(), e.begin(), e.end());
  }

  Var txt = encode_batch(tape, params, cfg, items);
  Var patches = tape.constant(Tensor({B * n_img, cfg.patch_dim()}, std::move(patch_rows)));
  Var img_pos = P("img_pos");
  if (B > 1) img_pos = embedding_lookup(img_pos, repeat_ids(B, n_img, false));
  Var img = add(linear(patches, P("img.patch.w"), P("img.patch.b")), img_pos);

  Var temb = tape.constant(Tensor({B, cfg.time_dim}, std::move(temb_rows)));
  Var c = linear(gelu(linear(temb, P("time.fc1.w"), P("time.fc1.b"))), P("time.fc2.w"), P("time.fc2.b"));
  Var c_act = gelu(c);
  const auto example_of_row = repeat_ids(B, n_img, true);
  // Per-example modulation rows spread over that example's image tokens.
  auto per_row = [&](Var m) { return B == 1 ? m : embedding_lookup(m, example_of_row); };

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = "blk." + std::to_string(i);
    try {
      const auto im = split_modulation(per_row(linear(c_act, P(b + ".ada.w"), P(b + ".ada.b"))), w);
      const auto tm = split_modulation(P(b + ".txt.mod"), w);

      auto qi = project_qkv(tape, params, b + ".img", modulate(layer_norm(img), im[0], im[1]), w);
      auto qt = project_qkv(tape, params, b + ".txt", modulate(layer_norm(txt), tm[0], tm[1]), w);

      std::vector<Var> o_imgs, o_txts;
      o_imgs.reserve(B);
      o_txts.reserve(B);
      for (std::size_t e = 0; e < B; ++e) {
        Var qi_e = B == 1 ? qi.q : rows_of(qi.q, e, n_img);
        Var ki_e = B == 1 ? qi.k : rows_of(qi.k, e, n_img);
        Var vi_e = B == 1 ? qi.v : rows_of(qi.v, e, n_img);
        Var qt_e = B == 1 ? qt.q : rows_of(qt.q, e, L);
        Var kt_e = B == 1 ? qt.k : rows_of(qt.k, e, L);
        Var vt_e = B == 1 ? qt.v : rows_of(qt.v, e, L);
        const Var ks[] = {ki_e, kt_e};
        const Var vs[] = {vi_e, vt_e};
        Var k_all = concat(ks, 0);
        Var v_all = concat(vs, 0);
        if (opts.isolate_text_stream) {
          o_imgs.push_back(attention(qi_e, k_all, v_all, cfg.heads));
          o_txts.push_back(attention(qt_e, kt_e, vt_e, cfg.heads));
        } else {
          const Var qs[] = {qi_e, qt_e};
          Var o = attention(concat(qs, 0), k_all, v_all, cfg.heads);
          o_imgs.push_back(slice(o, 0, 0, n_img));
          o_txts.push_back(slice(o, 0, n_img, n_img + L));
        }
      }
      Var o_img = B == 1 ? o_imgs[0] : concat(o_imgs, 0);
      Var o_txt = B == 1 ? o_txts[0] : concat(o_txts, 0);
      img = add(img, multiply(out_proj(tape, params, b + ".img", o_img), im[2]));
      txt = add(txt, multiply(out_proj(tape, params, b + ".txt", o_txt), tm[2]));

      img = add(img, multiply(mlp(tape, params, b + ".img", modulate(layer_norm(img), im[3], im[4])), im[5]));
      txt = add(txt, multiply(mlp(tape, params, b + ".txt", modulate(layer_norm(txt), tm[3], tm[4])), tm[5]));
    } catch (const NumericError& e) {
      throw NumericError("block " + std::to_string(i) + ": " + e.what());
    }
  }

  Var fm = per_row(linear(c_act, P("final.ada.w"), P("final.ada.b")));
  Var f_shift = slice(fm, 1, 0, w);
  Var f_scale = slice(fm, 1, w, 2 * w);
  Var velocity = linear(modulate(layer_norm(img), f_shift, f_scale), P("final.img.w"), P("final.img.b"));
  Var logits = linear(layer_norm(txt, P("final.txt_ln.g"), P("final.txt_ln.b")), P("final.txt.w"), P("final.txt.b"));
  return {velocity, logits};
}

DualVars forward(Tape& tape, ModelParams& params, const DDiTConfig& cfg, const ImageGrid& img_t,
                 const TokenSequence& text_t, double t_img, const ForwardOptions& opts) {
  const BatchItem item{&img_t, &text_t, t_img};
  return forward_batch(tape, params, cfg, std::span<const BatchItem>(&item, 1), opts);
}

std::vector<DualOutput> predict_batch(ModelParams& params, const DDiTConfig& cfg, std::span<const BatchItem> items,
                                      const ForwardOptions& opts) {
  Tape tape;
  auto out = forward_batch(tape, params, cfg, items, opts);
  const std::size_t vel_each = cfg.image.size();
  const std::size_t logit_each = cfg.text_len * static_cast<std::size_t>(cfg.vocab);
  std::vector<DualOutput> result(items.size());
  for (std::size_t b = 0; b < items.size(); ++b) {
    result[b].velocity = unpatchify(out.velocity.value().subspan(b * vel_each, vel_each), cfg.image, cfg.patch);
    const auto logits = out.text_logits.value().subspan(b * logit_each, logit_each);
    result[b].text_logits.assign(logits.begin(), logits.end());
  }
  return result;
}

DualOutput predict(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& img_t,
                   const TokenSequence& text_t, double t_img, const ForwardOptions& opts) {
  const BatchItem item{&img_t, &text_t, t_img};
  return std::move(predict_batch(params, cfg, std::span<const BatchItem>(&item, 1), opts)[0]);
}

}  // namespace ddit
