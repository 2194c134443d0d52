#include <set>

#include "doctest.h"
#include "ddit/world.hpp"

using namespace ddit;
using namespace ddit::world;

namespace {

Scene two_objects() {
  return Scene{{{ShapeKind::square, Color::red, Quadrant::top_left},
                {ShapeKind::circle, Color::blue, Quadrant::bottom_right}}};
}

}  // namespace

TEST_CASE("caption text for a two-object scene") {
  const auto cap = caption_tokens(two_objects());
  CHECK(cap.size() == kTextLen);
  CHECK(detokenize(cap.ids) == "a red square in top-left and blue circle in bottom-right .");
  const auto back = parse_caption(cap.ids);
  REQUIRE(back.has_value());
  CHECK(*back == two_objects());
}

TEST_CASE("three objects fill the caption exactly") {
  Scene s{{{ShapeKind::triangle, Color::cyan, Quadrant::top_left},
           {ShapeKind::circle, Color::green, Quadrant::top_right},
           {ShapeKind::square, Color::yellow, Quadrant::bottom_left}}};
  const auto cap = caption_tokens(s);
  CHECK(cap.ids.back() == tok::period);
  CHECK(parse_caption(cap.ids) == s);
}

TEST_CASE("malformed captions do not parse") {
  CHECK_FALSE(parse_caption(tokenize("a red square in")).has_value());
  CHECK_FALSE(parse_caption(tokenize("red a square in top-left .")).has_value());
  auto ids = caption_tokens(two_objects()).ids;
  ids.back() = tok::color_base;
  CHECK_FALSE(parse_caption(ids).has_value());
}

TEST_CASE("unknown words are named with the vocabulary") {
  try {
    tokenize("a purple square");
    FAIL("expected UnknownWordError");
  } catch (const UnknownWordError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'purple'") != std::string::npos);
    CHECK(msg.find("magenta") != std::string::npos);
  }
  CHECK_THROWS_AS(tokenize("<mask>"), UnknownWordError);
}

TEST_CASE("rendered scenes decode exactly") {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto s = random_scene(rng);
    CHECK(decode_grid(render(s)).scene == s);
  }
  CHECK(decode_grid(ImageGrid(kGridShape, 0.0)).scene.objects.empty());
}

TEST_CASE("random scenes use distinct colors and quadrants") {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const auto s = random_scene(rng);
    REQUIRE(s.objects.size() >= 1);
    REQUIRE(s.objects.size() <= 3);
    std::set<Color> colors;
    std::set<Quadrant> quads;
    for (const auto& o : s.objects) {
      colors.insert(o.color);
      quads.insert(o.quadrant);
    }
    CHECK(colors.size() == s.objects.size());
    CHECK(quads.size() == s.objects.size());
  }
}

TEST_CASE("questions carry a frozen prefix and one answer token") {
  const auto qs = questions_for(two_objects());
  REQUIRE_FALSE(qs.empty());
  for (const auto& qa : qs) {
    for (std::size_t j = 0; j < qa.answer_pos; ++j) CHECK(qa.sequence.is_frozen(j));
    CHECK_FALSE(qa.sequence.is_frozen(qa.answer_pos));
    CHECK(qa.sequence.ids[qa.answer_pos] == qa.answer);
  }
  const auto prompt = infill_prompt(tokenize("how many objects ?"));
  CHECK(prompt.ids[4] == tok::mask);
  CHECK(prompt.ids.back() == tok::mask);
  CHECK(prompt.is_frozen(3));
}

TEST_CASE("scoring a perfect and a partially wrong caption") {
  const auto truth = two_objects();
  const auto perfect = score_scene(truth, truth);
  CHECK(perfect.attribute() == 1.0);
  CHECK(perfect.exact);

  Scene off = truth;
  off.objects[1].color = Color::green;
  const auto s = score_scene(off, truth);
  CHECK(s.color == 0.5);
  CHECK(s.shape == 1.0);
  CHECK(s.quadrant == 1.0);
  CHECK_FALSE(s.exact);
}

TEST_CASE("spurious objects lower attribute accuracy") {
  Scene truth{{{ShapeKind::square, Color::red, Quadrant::top_left}}};
  Scene busy = truth;
  busy.objects.push_back({ShapeKind::circle, Color::blue, Quadrant::top_right});
  busy.objects.push_back({ShapeKind::circle, Color::green, Quadrant::bottom_left});
  busy.objects.push_back({ShapeKind::circle, Color::cyan, Quadrant::bottom_right});
  const auto s = score_scene(busy, truth);
  CHECK(s.quadrant == 0.25);
  CHECK(s.color == 0.25);
  CHECK_FALSE(s.count);
}

TEST_CASE("unparseable predictions score zero") {
  const auto s = score_scene(std::nullopt, two_objects());
  CHECK_FALSE(s.parsed);
  CHECK(s.attribute() == 0.0);
}

TEST_CASE("tally averages per task") {
  ScoreTally t;
  const auto truth = two_objects();
  t.add_scene("caption", score_scene(truth, truth));
  t.add_scene("caption", score_scene(std::nullopt, truth));
  t.add_answer("vqa", true);
  t.add_answer("vqa", false);
  t.add_answer("vqa", true);
  const auto m = t.metrics();
  CHECK(m.at("caption.attribute") == 0.5);
  CHECK(m.at("caption.unparsed") == 0.5);
  CHECK(m.at("vqa.accuracy") == doctest::Approx(2.0 / 3.0));
}
