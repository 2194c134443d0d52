#include <cmath>
#include <numbers>

#include "doctest.h"
#include "ddit/grad_check.hpp"
#include "ddit/rng.hpp"
#include "ddit/tensor.hpp"

using namespace ddit;
using doctest::Approx;

TEST_CASE("matmul of 2x2 matrices") {
  Tape tape;
  auto a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor({2, 2}, {5, 6, 7, 8}));
  auto c = matmul(a, b);
  const std::vector<double> want{19, 22, 43, 50};
  CHECK(std::vector<double>(c.value().begin(), c.value().end()) == want);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape tape;
  auto a = tape.constant(Tensor({2, 3}));
  auto b = tape.constant(Tensor({2, 2}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("row broadcast in add and its gradient") {
  Tape tape;
  auto a = tape.variable(Tensor({2, 2}, {1, 2, 3, 4}));
  auto b = tape.variable(Tensor({2}, {10, 20}));
  auto y = add(a, b);
  CHECK(y.value()[0] == 11);
  CHECK(y.value()[3] == 24);
  // d/db of sum(y^2) = 2 * column sums of y.
  tape.backward(sum_of_squares(y));
  CHECK(b.grad()[0] == Approx(2 * (11 + 13)));
  CHECK(b.grad()[1] == Approx(2 * (22 + 24)));
  CHECK(a.grad()[1] == Approx(2 * 22));
}

TEST_CASE("row broadcast in multiply and its gradient") {
  Tape tape;
  auto a = tape.variable(Tensor({2, 2}, {1, 2, 3, 4}));
  auto b = tape.variable(Tensor({2}, {5, 7}));
  tape.backward(mean(multiply(a, b)));
  // dL/da_ij = b_j / 4, dL/db_j = sum_i a_ij / 4
  CHECK(a.grad()[0] == Approx(5.0 / 4));
  CHECK(a.grad()[3] == Approx(7.0 / 4));
  CHECK(b.grad()[0] == Approx(1.0));
  CHECK(b.grad()[1] == Approx(1.5));
}

TEST_CASE("softmax and log_softmax rows") {
  Tape tape;
  auto x = tape.constant(Tensor({1, 2}, {0.0, std::log(3.0)}));
  auto p = softmax(x);
  CHECK(p.value()[0] == Approx(0.25));
  CHECK(p.value()[1] == Approx(0.75));
  auto z = tape.constant(Tensor({1, 2}, {0.0, 0.0}));
  CHECK(log_softmax(z).value()[1] == Approx(-std::numbers::ln2));
  // Large logits stay finite.
  auto big = tape.constant(Tensor({1, 2}, {1000.0, 0.0}));
  CHECK(log_softmax(big).value()[1] == Approx(-1000.0));
}

TEST_CASE("layer_norm centers and scales each row") {
  Tape tape;
  auto x = tape.constant(Tensor({1, 2}, {1.0, 3.0}));
  auto y = layer_norm(x, 0.0);
  CHECK(y.value()[0] == Approx(-1.0));
  CHECK(y.value()[1] == Approx(1.0));
}

TEST_CASE("layer_norm of 1, 2, 3 against the direct formula") {
  // mean 2, variance 2/3
  Tape tape;
  auto g = tape.constant(Tensor({3}, {1, 1, 1}));
  auto b = tape.constant(Tensor({3}, {0, 0, 0}));
  auto y = layer_norm(tape.constant(Tensor({1, 3}, {1, 2, 3})), g, b);
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(y.value()[0] == Approx(-1.0 / sd));
  CHECK(y.value()[1] == Approx(0.0));
  CHECK(y.value()[2] == Approx(1.0 / sd));
}

TEST_CASE("gelu values and slopes") {
  // gelu(x) = x Phi(x); gelu'(x) = Phi(x) + x phi(x)
  const double phi1 = 0.8413447460685429;
  const double pdf1 = 0.24197072451914337;
  Tape tape;
  auto x = tape.variable(Tensor({3}, {-1.0, 0.0, 1.0}));
  auto y = gelu(x);
  CHECK(y.value()[0] == Approx(-(1 - phi1)));
  CHECK(y.value()[1] == 0.0);
  CHECK(y.value()[2] == Approx(phi1));
  tape.backward(scale(mean(y), 3.0));
  CHECK(x.grad()[0] == Approx((1 - phi1) - pdf1));
  CHECK(x.grad()[1] == Approx(0.5));
  CHECK(x.grad()[2] == Approx(phi1 + pdf1));
}

TEST_CASE("slice, concat and transpose move values") {
  Tape tape;
  auto a = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto s = slice(a, 1, 1, 3);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.value()[2] == 5);
  auto t = transpose(a);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.value()[1] == 4);
  std::vector<Var> parts{a, a};
  auto c = concat(parts, 0);
  CHECK(c.shape() == Shape{4, 3});
  CHECK(c.value()[9] == 4);
}

TEST_CASE("embedding_lookup gathers rows and scatters gradients") {
  Tape tape;
  auto table = tape.variable(Tensor({3, 2}, {0, 1, 10, 11, 20, 21}));
  const std::vector<int> ids{2, 0, 2};
  auto rows = embedding_lookup(table, ids);
  CHECK(rows.value()[0] == 20);
  CHECK(rows.value()[3] == 1);
  tape.backward(scale(mean(rows), 6.0));
  CHECK(table.grad()[4] == Approx(2.0));   // row 2 used twice
  CHECK(table.grad()[2] == Approx(0.0));
}

TEST_CASE("non-finite results raise NumericError") {
  Tape tape;
  auto big = tape.constant(Tensor({1}, {1e308}));
  CHECK_THROWS_AS(scale(big, 10.0), NumericError);
}

TEST_CASE("parameters accumulate into the bound tensor") {
  Tensor w({2}, {1.0, -2.0});
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    auto p = tape.parameter(w);
    CHECK(tape.parameter(w).id() == p.id());
    tape.backward(sum_of_squares(p));
  }
  // Two passes of d(w^2)/dw = 2w.
  CHECK(w.grad()[0] == Approx(4.0));
  CHECK(w.grad()[1] == Approx(-8.0));
}

TEST_CASE("serialized tape replays to identical values") {
  Rng rng(3);
  std::vector<double> v(12);
  for (auto& x : v) x = rng.normal();
  Tape tape;
  auto a = tape.variable(Tensor({3, 4}, v));
  auto w = tape.constant(Tensor({4, 2}, std::vector<double>(v.begin(), v.begin() + 8)));
  auto loss = mean(gelu(layer_norm(matmul(a, w))));
  auto bytes = tape.serialize();
  auto copy = Tape::deserialize(bytes);
  copy.replay();
  CHECK(copy.value(loss.id())[0] == loss.item());
}

TEST_CASE("finite differences agree with a composite graph") {
  Rng rng(5);
  Tensor x({3, 4});
  Tensor w({4, 4});
  for (auto& v : x.values()) v = rng.normal();
  for (auto& v : w.values()) v = 0.5 * rng.normal();
  std::vector<NamedTensor> params{{"x", &x}, {"w", &w}};
  auto build = [&](Tape& t) {
    auto h = gelu(matmul(t.parameter(x), t.parameter(w)));
    return mean(multiply(log_softmax(layer_norm(h)), h));
  };
  const auto r = finite_difference_check(build, params);
  CHECK(r.checked == 28);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-6);
}
