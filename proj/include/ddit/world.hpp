#pragma once

// Procedural paired-modality world: scenes of up to three colored shapes on
// a 16x16 grid, a tiny caption/question grammar over a 32-token vocabulary,
// and exact decoders back to scene attributes for scoring.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ddit/image_flow.hpp"
#include "ddit/rng.hpp"
#include "ddit/text_diffusion.hpp"

namespace ddit::world {

enum class ShapeKind : std::uint8_t { square, circle, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow, magenta, cyan };
enum class Quadrant : std::uint8_t { top_left, top_right, bottom_left, bottom_right };

inline constexpr std::size_t kShapes = 3;
inline constexpr std::size_t kColors = 6;
inline constexpr std::size_t kQuadrants = 4;

struct SceneObject {
  ShapeKind shape = ShapeKind::square;
  Color color = Color::red;
  Quadrant quadrant = Quadrant::top_left;

  bool operator==(const SceneObject&) const = default;
};

// Objects sorted by quadrant; at most one per quadrant, distinct colors.
struct Scene {
  std::vector<SceneObject> objects;

  const SceneObject* in(Quadrant q) const;
  bool operator==(const Scene&) const = default;
};

std::string_view name(ShapeKind s);
std::string_view name(Color c);
std::string_view name(Quadrant q);
std::array<double, 3> anchor_rgb(Color c);

// Grid geometry. Each quadrant is 8x8; the 6x6 stencil sits at offset (1, 1).
inline constexpr GridShape kGridShape{16, 16, 3};
inline constexpr std::size_t kQuadrantSize = 8;
inline constexpr std::size_t kStencilSize = 6;
inline constexpr std::size_t kStencilOffset = 1;

bool stencil(ShapeKind s, std::size_t row, std::size_t col);

// ---------------------------------------------------------------- grammar

class UnknownWordError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace tok {
inline constexpr int pad = 0;
inline constexpr int null = 1;
inline constexpr int a = 2;
inline constexpr int and_ = 3;
inline constexpr int in = 4;
inline constexpr int color_base = 5;     // red..cyan = 5..10
inline constexpr int shape_base = 11;    // square..triangle = 11..13
inline constexpr int quadrant_base = 14; // top-left..bottom-right = 14..17
inline constexpr int what = 18;
inline constexpr int color = 19;
inline constexpr int is = 20;
inline constexpr int the = 21;
inline constexpr int shape = 22;
inline constexpr int how = 23;
inline constexpr int many = 24;
inline constexpr int objects = 25;
inline constexpr int question = 26;
inline constexpr int count_base = 27;    // one..three = 27..29
inline constexpr int period = 30;
inline constexpr int mask = 31;
}  // namespace tok

inline constexpr int kVocabSize = 32;
inline constexpr std::size_t kTextLen = 16;

Vocab vocab();
const std::vector<std::string>& words();

int color_token(Color c);
int shape_token(ShapeKind s);
int quadrant_token(Quadrant q);
int count_token(std::size_t n);

// Space-separated words to ids. Throws UnknownWordError naming the word and
// listing the vocabulary.
std::vector<int> tokenize(std::string_view text);
// Ids to words, dropping padding.
std::string detokenize(std::span<const int> ids);

// "a red square in top-left and blue circle in bottom-right ." padded to
// `length`. All positions are generation targets (none frozen).
TokenSequence caption_tokens(const Scene& scene, std::size_t length = kTextLen);
// Inverse of caption_tokens on well-formed captions; nullopt otherwise.
std::optional<Scene> parse_caption(std::span<const int> ids);
// All-frozen empty caption used as the unconditional input.
TokenSequence null_caption(std::size_t length = kTextLen);

enum class QuestionKind : std::uint8_t { color_of_shape, shape_in_quadrant, count };

struct QaPair {
  QuestionKind kind = QuestionKind::count;
  TokenSequence sequence;     // question (frozen) + answer + padding
  std::size_t answer_pos = 0;
  int answer = tok::pad;
};

// Question followed by the answer and padding. The question prefix is frozen.
QaPair make_qa(QuestionKind kind, std::span<const int> question, int answer, std::size_t length = kTextLen);
// Question prefix frozen, every other position set to the mask id.
TokenSequence infill_prompt(std::span<const int> question, std::size_t length = kTextLen);

// ---------------------------------------------------------------- examples

struct Example {
  ImageGrid image;
  Scene scene;
  TokenSequence caption;
  std::vector<QaPair> qa;
};

Scene random_scene(Rng& rng);
ImageGrid render(const Scene& scene);
std::vector<QaPair> questions_for(const Scene& scene, std::size_t length = kTextLen);
Example make_example(const Scene& scene);
Example generate_example(Rng& rng);

// ---------------------------------------------------------------- decoding

struct QuadrantEstimate {
  bool occupied = false;
  ShapeKind shape = ShapeKind::square;
  Color color = Color::red;
  double occupancy = 0.0;         // fraction of quadrant pixels lit
  double color_confidence = 0.0;  // lit pixels agreeing with the chosen color
  double shape_confidence = 0.0;  // pixel agreement with the chosen stencil
};

struct DecodedScene {
  Scene scene;
  std::array<QuadrantEstimate, kQuadrants> quadrants;
  double confidence() const;
};

inline constexpr double kLitThreshold = 0.5;     // mean |channel| for a lit pixel
inline constexpr std::size_t kMinLitPixels = 8;  // fewer lit pixels = empty quadrant

DecodedScene decode_grid(const ImageGrid& img);

// ---------------------------------------------------------------- scoring

struct SceneScore {
  bool parsed = true;
  double color = 0.0;
  double shape = 0.0;
  double quadrant = 0.0;
  bool count = false;
  bool exact = false;

  // Mean of color, shape and quadrant accuracy.
  double attribute() const { return (color + shape + quadrant) / 3.0; }
};

// Ground-truth objects are matched to predictions in the same quadrant
// first; the rest pair up in order with leftover predictions (quadrant
// wrong). Accuracies divide by the larger of the two object counts, so
// spurious objects lower them. nullopt predictions (unparseable) score zero
// everywhere.
SceneScore score_scene(const std::optional<Scene>& predicted, const Scene& truth);

class ScoreTally {
 public:
  void add_scene(const std::string& task, const SceneScore& s);
  void add_answer(const std::string& task, bool correct);
  // task.color, task.shape, task.quadrant, task.attribute, task.count,
  // task.exact, task.unparsed, task.n; answer tasks report task.accuracy.
  std::map<std::string, double> metrics() const;

 private:
  struct Sums {
    double color = 0, shape = 0, quadrant = 0, count = 0, exact = 0, unparsed = 0, correct = 0;
    std::size_t n = 0;
    bool answers = false;
  };
  std::map<std::string, Sums> sums_;
};

}  // namespace ddit::world
