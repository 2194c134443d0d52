#pragma once

// Dense 64-bit arrays and a recording tape for reverse-mode gradients.
//
// Every primitive checks its input shapes and the finiteness of its output.
// Values live in row-major order; "last axis" always means the innermost
// extent.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ddit {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor filled(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double item() const;

  bool has_grad() const { return grad_.size() == values_.size(); }
  void ensure_grad();
  void zero_grad();
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }

 private:
  Shape shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
};

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  multiply,
  scale,
  softmax,
  log_softmax,
  layer_norm,
  gelu,
  embedding_lookup,
  reshape,
  transpose,
  slice,
  concat,
  mean,
  sum_of_squares,
};

std::string_view op_name(OpKind kind);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Extra arguments of a primitive. Only the fields the op uses are read.
struct OpAttrs {
  double real = 0.0;                 // scale factor, layer_norm epsilon
  std::vector<std::int64_t> ints;    // ids, axis/begin/end, target shape
};

struct TapeNode {
  OpKind op = OpKind::leaf;
  Shape shape;
  std::vector<std::size_t> inputs;
  OpAttrs attrs;
  bool requires_grad = false;
  // Storage for computed values; empty when the node is bound to a parameter.
  std::vector<double> value;
  Tensor* bound = nullptr;
  std::vector<double> grad;
  // Per-row statistics kept for backward (layer_norm: mean and 1/std).
  std::vector<double> cache;
};

// Ordered record of primitive applications. Nodes are appended in
// evaluation order, so every node's inputs precede it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Leaf that holds a copy of `t` and never receives a gradient.
  Var constant(Tensor t);
  // Leaf that holds a copy of `t` and accumulates a gradient on the tape.
  Var variable(Tensor t);
  // Leaf bound to external storage. backward() adds into p.grad(), and the
  // node reports that accumulated slot as its gradient.
  // Binding the same tensor twice returns the same node.
  Var parameter(Tensor& p);

  // Generic entry point used by all primitives and by replay().
  Var apply(OpKind kind, std::span<const Var> inputs, OpAttrs attrs = {});

  // Reverse sweep from a scalar loss. Parameter leaves receive
  // d(loss)/d(parameter) added to their tensor's grad slot.
  void backward(Var loss);

  // Recompute every non-leaf node from the stored leaves, in order.
  void replay();

  // Self-contained byte image: op kinds, wiring, attributes and leaf values.
  // Parameter leaves are captured by value.
  std::vector<std::uint8_t> serialize() const;
  static Tape deserialize(std::span<const std::uint8_t> bytes);

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
  std::span<const double> value(std::size_t id) const;
  std::span<const double> grad(std::size_t id) const;
  Var var(std::size_t id) { return Var(this, id); }

 private:
  Var push_leaf(Tensor t, bool requires_grad);
  void forward_node(TapeNode& node);
  std::span<double> mutable_value(std::size_t id);

  std::vector<TapeNode> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_ids_;
};

// Primitives. Row broadcasting in add/multiply: `b` may have the shape of
// `a` or be a single row of width a.shape().back().
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var multiply(Var a, Var b);
Var scale(Var a, double s);
Var softmax(Var a);
Var log_softmax(Var a);
Var layer_norm(Var x, double eps = 1e-5);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var a);
Var embedding_lookup(Var table, std::span<const int> ids);
Var reshape(Var a, const Shape& shape);
Var transpose(Var a);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(std::span<const Var> parts, std::size_t axis);
Var mean(Var a);
Var sum_of_squares(Var a);

// Convenience compositions.
Var subtract(Var a, Var b);
Var linear(Var x, Var weight, Var bias);

}  // namespace ddit
