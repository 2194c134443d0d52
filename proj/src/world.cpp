#include "ddit/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace ddit::world {

const SceneObject* Scene::in(Quadrant q) const {
  for (const auto& o : objects) {
    if (o.quadrant == q) return &o;
  }
  return nullptr;
}

std::string_view name(ShapeKind s) {
  static constexpr std::string_view names[] = {"square", "circle", "triangle"};
  return names[static_cast<int>(s)];
}

std::string_view name(Color c) {
  static constexpr std::string_view names[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  return names[static_cast<int>(c)];
}

std::string_view name(Quadrant q) {
  static constexpr std::string_view names[] = {"top-left", "top-right", "bottom-left", "bottom-right"};
  return names[static_cast<int>(q)];
}

std::array<double, 3> anchor_rgb(Color c) {
  switch (c) {
    case Color::red: return {1, -1, -1};
    case Color::green: return {-1, 1, -1};
    case Color::blue: return {-1, -1, 1};
    case Color::yellow: return {1, 1, -1};
    case Color::magenta: return {1, -1, 1};
    case Color::cyan: return {-1, 1, 1};
  }
  return {0, 0, 0};
}

bool stencil(ShapeKind s, std::size_t row, std::size_t col) {
  if (row >= kStencilSize || col >= kStencilSize) return false;
  const double dy = static_cast<double>(row) - 2.5;
  const double dx = static_cast<double>(col) - 2.5;
  switch (s) {
    case ShapeKind::square:
      return true;
    case ShapeKind::circle:
      return dy * dy + dx * dx <= 7.0;
    case ShapeKind::triangle: {
      // Rows widen in pairs: 2, 2, 4, 4, 6, 6 centered pixels.
      const std::size_t half = row / 2 + 1;
      return col + half >= 3 && col < 3 + half;
    }
  }
  return false;
}

// ---------------------------------------------------------------- grammar

Vocab vocab() { return Vocab(kVocabSize, tok::mask); }

const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      "<pad>", "<null>", "a", "and", "in",
      "red", "green", "blue", "yellow", "magenta", "cyan",
      "square", "circle", "triangle",
      "top-left", "top-right", "bottom-left", "bottom-right",
      "what", "color", "is", "the", "shape", "how", "many", "objects", "?",
      "one", "two", "three", ".", "<mask>"};
  return w;
}

int color_token(Color c) { return tok::color_base + static_cast<int>(c); }
int shape_token(ShapeKind s) { return tok::shape_base + static_cast<int>(s); }
int quadrant_token(Quadrant q) { return tok::quadrant_base + static_cast<int>(q); }

int count_token(std::size_t n) {
  if (n < 1 || n > 3) throw std::out_of_range("count_token: only one to three objects are named");
  return tok::count_base + static_cast<int>(n) - 1;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  std::istringstream is{std::string(text)};
  std::string word;
  const auto& w = words();
  while (is >> word) {
    auto it = std::find(w.begin(), w.end(), word);
    if (it == w.end() || word == "<mask>") {
      std::string msg = "unknown word '" + word + "'; vocabulary:";
      for (const auto& v : w) {
        if (v != "<mask>") msg += " " + v;
      }
      throw UnknownWordError(msg);
    }
    ids.push_back(static_cast<int>(it - w.begin()));
  }
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  const auto& w = words();
  for (int id : ids) {
    if (id == tok::pad) continue;
    if (id < 0 || id >= kVocabSize) throw std::out_of_range("detokenize: id outside vocabulary");
    if (!out.empty()) out += ' ';
    out += w[static_cast<std::size_t>(id)];
  }
  return out;
}

TokenSequence caption_tokens(const Scene& scene, std::size_t length) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    ids.push_back(i == 0 ? tok::a : tok::and_);
    ids.push_back(color_token(o.color));
    ids.push_back(shape_token(o.shape));
    ids.push_back(tok::in);
    ids.push_back(quadrant_token(o.quadrant));
  }
  ids.push_back(tok::period);
  if (ids.size() > length) throw std::length_error("caption does not fit the text length");
  ids.resize(length, tok::pad);
  return TokenSequence(std::move(ids));
}

std::optional<Scene> parse_caption(std::span<const int> ids) {
  Scene scene;
  std::size_t i = 0;
  auto in_range = [](int id, int base, std::size_t n) { return id >= base && id < base + static_cast<int>(n); };
  while (true) {
    if (i + 5 > ids.size()) return std::nullopt;
    const int lead = scene.objects.empty() ? tok::a : tok::and_;
    if (ids[i] != lead) return std::nullopt;
    const int c = ids[i + 1], s = ids[i + 2], q = ids[i + 4];
    if (!in_range(c, tok::color_base, kColors) || !in_range(s, tok::shape_base, kShapes) ||
        ids[i + 3] != tok::in || !in_range(q, tok::quadrant_base, kQuadrants)) {
      return std::nullopt;
    }
    scene.objects.push_back({static_cast<ShapeKind>(s - tok::shape_base), static_cast<Color>(c - tok::color_base),
                             static_cast<Quadrant>(q - tok::quadrant_base)});
    i += 5;
    if (i < ids.size() && ids[i] == tok::period) break;
    if (i >= ids.size() || ids[i] != tok::and_) return std::nullopt;
  }
  for (std::size_t j = i + 1; j < ids.size(); ++j) {
    if (ids[j] != tok::pad) return std::nullopt;
  }
  std::stable_sort(scene.objects.begin(), scene.objects.end(),
                   [](const SceneObject& a, const SceneObject& b) { return a.quadrant < b.quadrant; });
  return scene;
}

TokenSequence null_caption(std::size_t length) {
  std::vector<int> ids(length, tok::pad);
  ids[0] = tok::null;
  return TokenSequence(std::move(ids), std::vector<std::uint8_t>(length, 1));
}

QaPair make_qa(QuestionKind kind, std::span<const int> question, int answer, std::size_t length) {
  if (question.size() + 1 > length) throw std::length_error("question does not fit the text length");
  QaPair qa;
  qa.kind = kind;
  qa.answer_pos = question.size();
  qa.answer = answer;
  std::vector<int> ids(question.begin(), question.end());
  ids.push_back(answer);
  ids.resize(length, tok::pad);
  std::vector<std::uint8_t> frozen(length, 0);
  std::fill_n(frozen.begin(), question.size(), 1);
  qa.sequence = TokenSequence(std::move(ids), std::move(frozen));
  return qa;
}

TokenSequence infill_prompt(std::span<const int> question, std::size_t length) {
  if (question.size() >= length) throw std::length_error("question leaves no room for an answer");
  std::vector<int> ids(length, tok::mask);
  std::vector<std::uint8_t> frozen(length, 0);
  for (std::size_t j = 0; j < question.size(); ++j) {
    ids[j] = question[j];
    frozen[j] = 1;
  }
  return TokenSequence(std::move(ids), std::move(frozen));
}

// ---------------------------------------------------------------- examples

Scene random_scene(Rng& rng) {
  const std::size_t n = 1 + rng.below(3);
  std::array<int, kQuadrants> quads{0, 1, 2, 3};
  std::array<int, kColors> colors{0, 1, 2, 3, 4, 5};
  // Partial Fisher-Yates draws without replacement.
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(quads[i], quads[i + rng.below(kQuadrants - i)]);
    std::swap(colors[i], colors[i + rng.below(kColors - i)]);
  }
  Scene scene;
  for (std::size_t i = 0; i < n; ++i) {
    scene.objects.push_back({static_cast<ShapeKind>(rng.below(kShapes)), static_cast<Color>(colors[i]),
                             static_cast<Quadrant>(quads[i])});
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.quadrant < b.quadrant; });
  return scene;
}

ImageGrid render(const Scene& scene) {
  ImageGrid img(kGridShape, 0.0);
  for (const auto& o : scene.objects) {
    const auto q = static_cast<std::size_t>(o.quadrant);
    const std::size_t y0 = (q / 2) * kQuadrantSize + kStencilOffset;
    const std::size_t x0 = (q % 2) * kQuadrantSize + kStencilOffset;
    const auto rgb = anchor_rgb(o.color);
    for (std::size_t r = 0; r < kStencilSize; ++r) {
      for (std::size_t c = 0; c < kStencilSize; ++c) {
        if (!stencil(o.shape, r, c)) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(y0 + r, x0 + c, ch) = rgb[ch];
      }
    }
  }
  return img;
}

std::vector<QaPair> questions_for(const Scene& scene, std::size_t length) {
  std::vector<QaPair> out;
  for (std::size_t s = 0; s < kShapes; ++s) {
    const auto shape = static_cast<ShapeKind>(s);
    const SceneObject* only = nullptr;
    std::size_t hits = 0;
    for (const auto& o : scene.objects) {
      if (o.shape == shape) {
        only = &o;
        ++hits;
      }
    }
    if (hits != 1) continue;
    const int q[] = {tok::what, tok::color, tok::is, tok::the, shape_token(shape), tok::question};
    out.push_back(make_qa(QuestionKind::color_of_shape, q, color_token(only->color), length));
  }
  for (const auto& o : scene.objects) {
    const int q[] = {tok::what, tok::shape, tok::is, tok::in, quadrant_token(o.quadrant), tok::question};
    out.push_back(make_qa(QuestionKind::shape_in_quadrant, q, shape_token(o.shape), length));
  }
  const int q[] = {tok::how, tok::many, tok::objects, tok::question};
  out.push_back(make_qa(QuestionKind::count, q, count_token(scene.objects.size()), length));
  return out;
}

Example make_example(const Scene& scene) {
  return {render(scene), scene, caption_tokens(scene), questions_for(scene)};
}

Example generate_example(Rng& rng) { return make_example(random_scene(rng)); }

// ---------------------------------------------------------------- decoding

double DecodedScene::confidence() const {
  double c = 1.0;
  for (const auto& q : quadrants) {
    if (q.occupied) c = std::min({c, q.color_confidence, q.shape_confidence});
  }
  return c;
}

namespace {

Color nearest_color(const std::array<double, 3>& rgb) {
  double best = std::numeric_limits<double>::infinity();
  Color pick = Color::red;
  for (std::size_t k = 0; k < kColors; ++k) {
    const auto a = anchor_rgb(static_cast<Color>(k));
    double d = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) d += (rgb[ch] - a[ch]) * (rgb[ch] - a[ch]);
    if (d < best) {
      best = d;
      pick = static_cast<Color>(k);
    }
  }
  return pick;
}

}  // namespace

DecodedScene decode_grid(const ImageGrid& img) {
  if (!(img.shape == kGridShape)) throw ShapeError("decode_grid: expected a 16x16x3 grid");
  DecodedScene out;
  for (std::size_t q = 0; q < kQuadrants; ++q) {
    const std::size_t y0 = (q / 2) * kQuadrantSize;
    const std::size_t x0 = (q % 2) * kQuadrantSize;
    std::array<bool, kQuadrantSize * kQuadrantSize> lit{};
    std::size_t n_lit = 0;
    std::array<double, 3> mean_rgb{0, 0, 0};
    for (std::size_t r = 0; r < kQuadrantSize; ++r) {
      for (std::size_t c = 0; c < kQuadrantSize; ++c) {
        double mag = 0.0;
        for (std::size_t ch = 0; ch < 3; ++ch) mag += std::abs(img.at(y0 + r, x0 + c, ch));
        if (mag / 3.0 > kLitThreshold) {
          lit[r * kQuadrantSize + c] = true;
          ++n_lit;
          for (std::size_t ch = 0; ch < 3; ++ch) mean_rgb[ch] += img.at(y0 + r, x0 + c, ch);
        }
      }
    }
    auto& est = out.quadrants[q];
    est.occupancy = static_cast<double>(n_lit) / static_cast<double>(lit.size());
    if (n_lit < kMinLitPixels) continue;
    est.occupied = true;
    for (auto& v : mean_rgb) v /= static_cast<double>(n_lit);
    est.color = nearest_color(mean_rgb);

    std::size_t agree_color = 0;
    for (std::size_t r = 0; r < kQuadrantSize; ++r) {
      for (std::size_t c = 0; c < kQuadrantSize; ++c) {
        if (!lit[r * kQuadrantSize + c]) continue;
        std::array<double, 3> px{};
        for (std::size_t ch = 0; ch < 3; ++ch) px[ch] = img.at(y0 + r, x0 + c, ch);
        if (nearest_color(px) == est.color) ++agree_color;
      }
    }
    est.color_confidence = static_cast<double>(agree_color) / static_cast<double>(n_lit);

    std::size_t best_agree = 0;
    for (std::size_t s = 0; s < kShapes; ++s) {
      std::size_t agree = 0;
      for (std::size_t r = 0; r < kQuadrantSize; ++r) {
        for (std::size_t c = 0; c < kQuadrantSize; ++c) {
          const bool on = r >= kStencilOffset && c >= kStencilOffset &&
                          stencil(static_cast<ShapeKind>(s), r - kStencilOffset, c - kStencilOffset);
          if (on == lit[r * kQuadrantSize + c]) ++agree;
        }
      }
      if (agree > best_agree) {
        best_agree = agree;
        est.shape = static_cast<ShapeKind>(s);
      }
    }
    est.shape_confidence = static_cast<double>(best_agree) / static_cast<double>(lit.size());
    out.scene.objects.push_back({est.shape, est.color, static_cast<Quadrant>(q)});
  }
  return out;
}

// ---------------------------------------------------------------- scoring

SceneScore score_scene(const std::optional<Scene>& predicted, const Scene& truth) {
  SceneScore s;
  if (!predicted) {
    s.parsed = false;
    return s;
  }
  const auto& pred = predicted->objects;
  std::vector<bool> used(pred.size(), false);
  std::vector<const SceneObject*> match(truth.objects.size(), nullptr);
  std::vector<bool> same_quadrant(truth.objects.size(), false);
  for (std::size_t i = 0; i < truth.objects.size(); ++i) {
    for (std::size_t j = 0; j < pred.size(); ++j) {
      if (!used[j] && pred[j].quadrant == truth.objects[i].quadrant) {
        used[j] = true;
        match[i] = &pred[j];
        same_quadrant[i] = true;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < truth.objects.size(); ++i) {
    if (match[i]) continue;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      if (!used[j]) {
        used[j] = true;
        match[i] = &pred[j];
        break;
      }
    }
  }
  double c = 0, sh = 0, q = 0;
  for (std::size_t i = 0; i < truth.objects.size(); ++i) {
    if (same_quadrant[i]) q += 1;
    if (!match[i]) continue;
    if (match[i]->color == truth.objects[i].color) c += 1;
    if (match[i]->shape == truth.objects[i].shape) sh += 1;
  }
  // Extra predicted objects count as misses, so painting every quadrant
  // does not buy attribute credit.
  const double n = static_cast<double>(std::max<std::size_t>({truth.objects.size(), pred.size(), 1}));
  s.color = c / n;
  s.shape = sh / n;
  s.quadrant = q / n;
  s.count = pred.size() == truth.objects.size();
  Scene sorted = *predicted;
  std::stable_sort(sorted.objects.begin(), sorted.objects.end(),
                   [](const SceneObject& a, const SceneObject& b) { return a.quadrant < b.quadrant; });
  s.exact = sorted == truth;
  return s;
}

void ScoreTally::add_scene(const std::string& task, const SceneScore& s) {
  auto& t = sums_[task];
  t.color += s.color;
  t.shape += s.shape;
  t.quadrant += s.quadrant;
  t.count += s.count ? 1 : 0;
  t.exact += s.exact ? 1 : 0;
  t.unparsed += s.parsed ? 0 : 1;
  ++t.n;
}

void ScoreTally::add_answer(const std::string& task, bool correct) {
  auto& t = sums_[task];
  t.answers = true;
  t.correct += correct ? 1 : 0;
  ++t.n;
}

std::map<std::string, double> ScoreTally::metrics() const {
  std::map<std::string, double> m;
  for (const auto& [task, t] : sums_) {
    const double n = static_cast<double>(std::max<std::size_t>(t.n, 1));
    m[task + ".n"] = static_cast<double>(t.n);
    if (t.answers) {
      m[task + ".accuracy"] = t.correct / n;
      continue;
    }
    m[task + ".color"] = t.color / n;
    m[task + ".shape"] = t.shape / n;
    m[task + ".quadrant"] = t.quadrant / n;
    m[task + ".attribute"] = (t.color + t.shape + t.quadrant) / (3.0 * n);
    m[task + ".count"] = t.count / n;
    m[task + ".exact"] = t.exact / n;
    m[task + ".unparsed"] = t.unparsed / n;
  }
  return m;
}

}  // namespace ddit::world
