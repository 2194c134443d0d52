#include "ddit/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

#include "ddit/binary_io.hpp"

namespace ddit {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr std::string_view kTapeMagic = "DDITTAPE";
constexpr std::uint32_t kTapeVersion = 1;

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b, std::string_view why) {
  std::ostringstream os;
  os << op_name(kind) << ": " << why << " (" << to_string(a) << " vs " << to_string(b) << ")";
  throw ShapeError(os.str());
}

void require_finite(std::span<const double> vs, std::string_view what) {
  // v * 0 is NaN exactly when v is not finite; independent lanes let the
  // compiler vectorize the scan.
  double lanes[8] = {};
  const std::size_t whole = vs.size() / 8 * 8;
  for (std::size_t i = 0; i < whole; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lanes[j] += vs[i + j] * 0.0;
  }
  double acc = 0.0;
  for (double l : lanes) acc += l;
  for (std::size_t i = whole; i < vs.size(); ++i) acc += vs[i] * 0.0;
  if (acc == 0.0) return;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (!std::isfinite(vs[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << vs[i] << " at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

bool row_broadcast(const Shape& a, const Shape& b) {
  if (a.empty() || b.empty()) return false;
  if (numel(b) != a.back()) return false;
  for (std::size_t i = 0; i + 1 < b.size(); ++i) {
    if (b[i] != 1) return false;
  }
  return b.back() == a.back();
}

// [outer, axis, inner] factorization around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t dim = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

// Uses the stored output y = x * Phi(x) to recover Phi without another erf.
double gelu_slope(double x, double y) {
  const double cdf = x != 0.0 ? y / x : 0.5;
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::multiply: return "multiply";
    case OpKind::scale: return "scale";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::mean: return "mean";
    case OpKind::sum_of_squares: return "sum_of_squares";
  }
  return "unknown";
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), values_(numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (numel(shape_) != values_.size()) {
    throw ShapeError("Tensor: shape " + to_string(shape_) + " holds " +
                     std::to_string(numel(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
  require_finite(values_, "Tensor");
}

Tensor Tensor::filled(Shape shape, double v) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return values_[0];
}

void Tensor::ensure_grad() {
  if (grad_.size() != values_.size()) grad_.assign(values_.size(), 0.0);
}

void Tensor::zero_grad() { grad_.assign(values_.size(), 0.0); }

// ---------------------------------------------------------------- Var

const Shape& Var::shape() const { return tape_->node(id_).shape; }
std::span<const double> Var::value() const { return tape_->value(id_); }
std::span<const double> Var::grad() const { return tape_->grad(id_); }

double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw ShapeError("item() on var of shape " + to_string(shape()));
  return v[0];
}

// ---------------------------------------------------------------- Tape

std::span<const double> Tape::value(std::size_t id) const {
  const auto& n = nodes_.at(id);
  if (n.bound) return n.bound->values();
  return n.value;
}

std::span<double> Tape::mutable_value(std::size_t id) {
  auto& n = nodes_[id];
  return n.value;
}

std::span<const double> Tape::grad(std::size_t id) const {
  const auto& n = nodes_.at(id);
  if (n.bound != nullptr) return std::as_const(*n.bound).grad();
  return n.grad;
}

Var Tape::push_leaf(Tensor t, bool requires_grad) {
  require_finite(t.values(), "leaf");
  TapeNode n;
  n.op = OpKind::leaf;
  n.shape = t.shape();
  n.value.assign(t.values().begin(), t.values().end());
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor t) { return push_leaf(std::move(t), false); }
Var Tape::variable(Tensor t) { return push_leaf(std::move(t), true); }

Var Tape::parameter(Tensor& p) {
  if (auto it = bound_ids_.find(&p); it != bound_ids_.end()) return Var(this, it->second);
  TapeNode n;
  n.op = OpKind::leaf;
  n.shape = p.shape();
  n.bound = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  bound_ids_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::apply(OpKind kind, std::span<const Var> inputs, OpAttrs attrs) {
  if (kind == OpKind::leaf) throw std::invalid_argument("apply: leaf is not an operation");
  TapeNode n;
  n.op = kind;
  n.attrs = std::move(attrs);
  for (const auto& v : inputs) {
    if (v.tape() != this) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": input from another tape");
    }
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  forward_node(n);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::forward_node(TapeNode& n) {
  auto in = [&](std::size_t k) -> const TapeNode& { return nodes_[n.inputs.at(k)]; };
  auto val = [&](std::size_t k) { return value(n.inputs.at(k)); };
  auto arity = [&](std::size_t want) {
    if (n.inputs.size() != want) {
      throw std::invalid_argument(std::string(op_name(n.op)) + ": expected " +
                                  std::to_string(want) + " inputs");
    }
  };

  switch (n.op) {
    case OpKind::leaf:
      return;

    case OpKind::matmul: {
      arity(2);
      const auto& a = in(0).shape;
      const auto& b = in(1).shape;
      if (a.size() != 2 || b.size() != 2 || a[1] != b[0]) shape_fail(n.op, a, b, "inner dims differ");
      n.shape = {a[0], b[1]};
      n.value.resize(a[0] * b[1]);
      ConstMap A(val(0).data(), a[0], a[1]);
      ConstMap B(val(1).data(), b[0], b[1]);
      MutMap C(n.value.data(), a[0], b[1]);
      C.noalias() = A * B;
      break;
    }

    case OpKind::add:
    case OpKind::multiply: {
      arity(2);
      const auto& a = in(0).shape;
      const auto& b = in(1).shape;
      const bool same = a == b;
      if (!same && !row_broadcast(a, b)) shape_fail(n.op, a, b, "shapes neither equal nor row-broadcastable");
      n.shape = a;
      auto x = val(0);
      auto y = val(1);
      n.value.resize(x.size());
      const std::size_t w = same ? x.size() : b.back();
      const bool is_add = n.op == OpKind::add;
      for (std::size_t r = 0; r < x.size(); r += w) {
        const double* xr = x.data() + r;
        double* out = n.value.data() + r;
        const double* yr = y.data() + (same ? r : 0);
        if (is_add) {
          for (std::size_t j = 0; j < w; ++j) out[j] = xr[j] + yr[j];
        } else {
          for (std::size_t j = 0; j < w; ++j) out[j] = xr[j] * yr[j];
        }
      }
      break;
    }

    case OpKind::scale: {
      arity(1);
      n.shape = in(0).shape;
      auto x = val(0);
      n.value.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = n.attrs.real * x[i];
      break;
    }

    case OpKind::softmax:
    case OpKind::log_softmax: {
      arity(1);
      n.shape = in(0).shape;
      if (n.shape.empty()) throw ShapeError(std::string(op_name(n.op)) + ": scalar input");
      auto x = val(0);
      const std::size_t w = n.shape.back();
      n.value.resize(x.size());
      for (std::size_t r = 0; r < x.size() / w; ++r) {
        const double* xr = x.data() + r * w;
        double* yr = n.value.data() + r * w;
        const double mx = *std::max_element(xr, xr + w);
        double sum = 0.0;
        for (std::size_t j = 0; j < w; ++j) sum += std::exp(xr[j] - mx);
        if (n.op == OpKind::softmax) {
          for (std::size_t j = 0; j < w; ++j) yr[j] = std::exp(xr[j] - mx) / sum;
        } else {
          const double lse = mx + std::log(sum);
          for (std::size_t j = 0; j < w; ++j) yr[j] = xr[j] - lse;
        }
      }
      break;
    }

    case OpKind::layer_norm: {
      if (n.inputs.size() != 1 && n.inputs.size() != 3) {
        throw std::invalid_argument("layer_norm: expected 1 or 3 inputs");
      }
      n.shape = in(0).shape;
      if (n.shape.empty()) throw ShapeError("layer_norm: scalar input");
      const std::size_t w = n.shape.back();
      const bool affine = n.inputs.size() == 3;
      if (affine) {
        if (numel(in(1).shape) != w) shape_fail(n.op, n.shape, in(1).shape, "gain width");
        if (numel(in(2).shape) != w) shape_fail(n.op, n.shape, in(2).shape, "bias width");
      }
      auto x = val(0);
      const std::size_t rows = x.size() / w;
      n.value.resize(x.size());
      n.cache.resize(2 * rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * w;
        double mu = 0.0;
        for (std::size_t j = 0; j < w; ++j) mu += xr[j];
        mu /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(w);
        const double rstd = 1.0 / std::sqrt(var + n.attrs.real);
        n.cache[2 * r] = mu;
        n.cache[2 * r + 1] = rstd;
        double* yr = n.value.data() + r * w;
        for (std::size_t j = 0; j < w; ++j) {
          const double xhat = (xr[j] - mu) * rstd;
          yr[j] = affine ? xhat * val(1)[j] + val(2)[j] : xhat;
        }
      }
      break;
    }

    case OpKind::gelu: {
      arity(1);
      n.shape = in(0).shape;
      auto x = val(0);
      n.value.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = gelu_value(x[i]);
      break;
    }

    case OpKind::embedding_lookup: {
      arity(1);
      const auto& t = in(0).shape;
      if (t.size() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + to_string(t));
      const std::size_t w = t[1];
      n.shape = {n.attrs.ints.size(), w};
      n.value.resize(n.attrs.ints.size() * w);
      auto table = val(0);
      for (std::size_t i = 0; i < n.attrs.ints.size(); ++i) {
        const auto id = n.attrs.ints[i];
        if (id < 0 || static_cast<std::size_t>(id) >= t[0]) {
          throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                  " outside table of " + std::to_string(t[0]) + " rows");
        }
        std::copy_n(table.data() + static_cast<std::size_t>(id) * w, w, n.value.data() + i * w);
      }
      break;
    }

    case OpKind::reshape: {
      arity(1);
      Shape target(n.attrs.ints.begin(), n.attrs.ints.end());
      if (numel(target) != numel(in(0).shape)) shape_fail(n.op, in(0).shape, target, "element count differs");
      n.shape = target;
      auto x = val(0);
      n.value.assign(x.begin(), x.end());
      break;
    }

    case OpKind::transpose: {
      arity(1);
      const auto& a = in(0).shape;
      if (a.size() != 2) throw ShapeError("transpose: rank-2 input required, got " + to_string(a));
      n.shape = {a[1], a[0]};
      n.value.resize(a[0] * a[1]);
      MutMap(n.value.data(), a[1], a[0]) = ConstMap(val(0).data(), a[0], a[1]).transpose();
      break;
    }

    case OpKind::slice: {
      arity(1);
      const auto& a = in(0).shape;
      if (n.attrs.ints.size() != 3) throw std::invalid_argument("slice: attrs must be {axis, begin, end}");
      const auto axis = static_cast<std::size_t>(n.attrs.ints[0]);
      const auto begin = static_cast<std::size_t>(n.attrs.ints[1]);
      const auto end = static_cast<std::size_t>(n.attrs.ints[2]);
      if (axis >= a.size() || begin >= end || end > a[axis]) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " invalid for " + to_string(a));
      }
      const auto sp = split_axis(a, axis);
      n.shape = a;
      n.shape[axis] = end - begin;
      const std::size_t len = (end - begin) * sp.inner;
      n.value.resize(sp.outer * len);
      auto x = val(0);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(x.data() + (o * sp.dim + begin) * sp.inner, len, n.value.data() + o * len);
      }
      break;
    }

    case OpKind::concat: {
      if (n.inputs.empty()) throw std::invalid_argument("concat: no inputs");
      if (n.attrs.ints.size() != 1) throw std::invalid_argument("concat: attrs must be {axis}");
      const auto axis = static_cast<std::size_t>(n.attrs.ints[0]);
      const auto& first = in(0).shape;
      if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
      Shape out = first;
      out[axis] = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto& s = in(k).shape;
        if (s.size() != first.size()) shape_fail(n.op, first, s, "rank differs");
        for (std::size_t d = 0; d < s.size(); ++d) {
          if (d != axis && s[d] != first[d]) shape_fail(n.op, first, s, "non-axis extent differs");
        }
        out[axis] += s[axis];
      }
      n.shape = out;
      const auto sp = split_axis(out, axis);
      n.value.resize(numel(out));
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto part = split_axis(in(k).shape, axis);
        auto x = val(k);
        const std::size_t len = part.dim * part.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          std::copy_n(x.data() + o * len, len, n.value.data() + (o * sp.dim + offset) * sp.inner);
        }
        offset += part.dim;
      }
      break;
    }

    case OpKind::mean:
    case OpKind::sum_of_squares: {
      arity(1);
      auto x = val(0);
      if (x.empty()) throw ShapeError(std::string(op_name(n.op)) + ": empty input");
      double acc = 0.0;
      if (n.op == OpKind::mean) {
        for (double v : x) acc += v;
        acc /= static_cast<double>(x.size());
      } else {
        for (double v : x) acc += v * v;
      }
      n.shape = {};
      n.value = {acc};
      break;
    }
  }
  require_finite(n.value, op_name(n.op));
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is detached from this tape");
  if (loss.id() >= nodes_.size()) throw std::invalid_argument("backward: loss node out of range");
  if (numel(nodes_[loss.id()].shape) != 1) {
    throw ShapeError("backward: loss must be scalar, got " + to_string(nodes_[loss.id()].shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  // Parameter leaves accumulate straight into their tensor's grad slot.
  auto grad_of = [&](std::size_t id) -> std::span<double> {
    auto& node = nodes_[id];
    if (node.bound != nullptr) {
      node.bound->ensure_grad();
      return node.bound->grad();
    }
    if (node.grad.empty()) node.grad.assign(numel(node.shape), 0.0);
    return node.grad;
  };
  // Parameters and variables always report a gradient, even when zero.
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    if (nodes_[i].op == OpKind::leaf && nodes_[i].requires_grad) grad_of(i);
  }
  grad_of(loss.id())[0] = 1.0;

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    TapeNode& n = nodes_[id];
    if (n.op == OpKind::leaf || !n.requires_grad || n.grad.empty()) continue;
    const auto& dy = n.grad;
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
    auto in_val = [&](std::size_t k) { return value(n.inputs[k]); };

    switch (n.op) {
      case OpKind::leaf:
        break;

      case OpKind::matmul: {
        const auto& a = nodes_[n.inputs[0]].shape;
        const auto& b = nodes_[n.inputs[1]].shape;
        ConstMap dC(dy.data(), a[0], b[1]);
        if (wants(0)) {
          MutMap dA(grad_of(n.inputs[0]).data(), a[0], a[1]);
          dA.noalias() += dC * ConstMap(in_val(1).data(), b[0], b[1]).transpose();
        }
        if (wants(1)) {
          MutMap dB(grad_of(n.inputs[1]).data(), b[0], b[1]);
          dB.noalias() += ConstMap(in_val(0).data(), a[0], a[1]).transpose() * dC;
        }
        break;
      }

      case OpKind::add:
      case OpKind::multiply: {
        const bool same = nodes_[n.inputs[0]].shape == nodes_[n.inputs[1]].shape;
        const std::size_t w = same ? dy.size() : last_dim(nodes_[n.inputs[1]].shape);
        const bool is_add = n.op == OpKind::add;
        auto x = in_val(0);
        auto y = in_val(1);
        for (std::size_t k = 0; k < 2; ++k) {
          if (!wants(k)) continue;
          auto g = grad_of(n.inputs[k]);
          // d/dx of x*y is y and vice versa.
          const auto other = k == 0 ? y : x;
          const bool other_broadcast = k == 0 ? !same : false;
          for (std::size_t r = 0; r < dy.size(); r += w) {
            const double* dr = dy.data() + r;
            double* gr = g.data() + ((k == 1 && !same) ? 0 : r);
            if (is_add) {
              for (std::size_t j = 0; j < w; ++j) gr[j] += dr[j];
            } else {
              const double* orow = other.data() + (other_broadcast ? 0 : r);
              for (std::size_t j = 0; j < w; ++j) gr[j] += dr[j] * orow[j];
            }
          }
        }
        break;
      }

      case OpKind::scale: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += n.attrs.real * dy[i];
        break;
      }

      case OpKind::softmax: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        const std::size_t w = n.shape.back();
        for (std::size_t r = 0; r < dy.size() / w; ++r) {
          const double* yr = n.value.data() + r * w;
          const double* dr = dy.data() + r * w;
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += dr[j] * yr[j];
          for (std::size_t j = 0; j < w; ++j) g[r * w + j] += yr[j] * (dr[j] - dot);
        }
        break;
      }

      case OpKind::log_softmax: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        const std::size_t w = n.shape.back();
        for (std::size_t r = 0; r < dy.size() / w; ++r) {
          const double* yr = n.value.data() + r * w;
          const double* dr = dy.data() + r * w;
          double sum = 0.0;
          for (std::size_t j = 0; j < w; ++j) sum += dr[j];
          for (std::size_t j = 0; j < w; ++j) g[r * w + j] += dr[j] - std::exp(yr[j]) * sum;
        }
        break;
      }

      case OpKind::layer_norm: {
        const std::size_t w = n.shape.back();
        const std::size_t rows = dy.size() / w;
        const bool affine = n.inputs.size() == 3;
        auto x = in_val(0);
        std::vector<double> gain(w, 1.0);
        if (affine) std::copy_n(in_val(1).data(), w, gain.data());
        std::vector<double> xhat(w), dxhat(w);
        for (std::size_t r = 0; r < rows; ++r) {
          const double mu = n.cache[2 * r];
          const double rstd = n.cache[2 * r + 1];
          const double* dr = dy.data() + r * w;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < w; ++j) {
            xhat[j] = (x[r * w + j] - mu) * rstd;
            dxhat[j] = dr[j] * gain[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
          }
          m1 /= static_cast<double>(w);
          m2 /= static_cast<double>(w);
          if (wants(0)) {
            auto g = grad_of(n.inputs[0]);
            for (std::size_t j = 0; j < w; ++j) g[r * w + j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
          }
          if (affine && wants(1)) {
            auto g = grad_of(n.inputs[1]);
            for (std::size_t j = 0; j < w; ++j) g[j] += dr[j] * xhat[j];
          }
          if (affine && wants(2)) {
            auto g = grad_of(n.inputs[2]);
            for (std::size_t j = 0; j < w; ++j) g[j] += dr[j];
          }
        }
        break;
      }

      case OpKind::gelu: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        auto x = in_val(0);
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * gelu_slope(x[i], n.value[i]);
        break;
      }

      case OpKind::embedding_lookup: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        const std::size_t w = n.shape[1];
        for (std::size_t i = 0; i < n.attrs.ints.size(); ++i) {
          const auto row = static_cast<std::size_t>(n.attrs.ints[i]);
          for (std::size_t j = 0; j < w; ++j) g[row * w + j] += dy[i * w + j];
        }
        break;
      }

      case OpKind::reshape: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
        break;
      }

      case OpKind::transpose: {
        if (!wants(0)) break;
        const auto& a = nodes_[n.inputs[0]].shape;
        MutMap(grad_of(n.inputs[0]).data(), a[0], a[1]) += ConstMap(dy.data(), a[1], a[0]).transpose();
        break;
      }

      case OpKind::slice: {
        if (!wants(0)) break;
        const auto& a = nodes_[n.inputs[0]].shape;
        const auto axis = static_cast<std::size_t>(n.attrs.ints[0]);
        const auto begin = static_cast<std::size_t>(n.attrs.ints[1]);
        const auto end = static_cast<std::size_t>(n.attrs.ints[2]);
        const auto sp = split_axis(a, axis);
        const std::size_t len = (end - begin) * sp.inner;
        auto g = grad_of(n.inputs[0]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          double* dst = g.data() + (o * sp.dim + begin) * sp.inner;
          const double* src = dy.data() + o * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        break;
      }

      case OpKind::concat: {
        const auto axis = static_cast<std::size_t>(n.attrs.ints[0]);
        const auto sp = split_axis(n.shape, axis);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto part = split_axis(nodes_[n.inputs[k]].shape, axis);
          if (wants(k)) {
            auto g = grad_of(n.inputs[k]);
            const std::size_t len = part.dim * part.inner;
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const double* src = dy.data() + (o * sp.dim + offset) * sp.inner;
              for (std::size_t i = 0; i < len; ++i) g[o * len + i] += src[i];
            }
          }
          offset += part.dim;
        }
        break;
      }

      case OpKind::mean: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        const double d = dy[0] / static_cast<double>(g.size());
        for (auto& v : g) v += d;
        break;
      }

      case OpKind::sum_of_squares: {
        if (!wants(0)) break;
        auto g = grad_of(n.inputs[0]);
        auto x = in_val(0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * x[i] * dy[0];
        break;
      }
    }
    // Interior gradients are no longer needed once propagated.
    if (id != loss.id()) {
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }

}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (n.op != OpKind::leaf) forward_node(n);
  }
}

std::vector<std::uint8_t> Tape::serialize() const {
  ByteWriter w;
  w.put_raw(kTapeMagic);
  w.put<std::uint32_t>(kTapeVersion);
  w.put<std::uint64_t>(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const auto& n = nodes_[id];
    w.put<std::uint8_t>(static_cast<std::uint8_t>(n.op));
    w.put<std::uint8_t>(n.requires_grad ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n.shape.size()));
    for (auto d : n.shape) w.put<std::uint64_t>(d);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n.inputs.size()));
    for (auto i : n.inputs) w.put<std::uint64_t>(i);
    w.put<double>(n.attrs.real);
    w.put<std::uint64_t>(n.attrs.ints.size());
    w.put_array<std::int64_t>(n.attrs.ints);
    if (n.op == OpKind::leaf) w.put_array<double>(value(id));
  }
  return std::move(w.bytes());
}

Tape Tape::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kTapeMagic);
  if (r.get<std::uint32_t>() != kTapeVersion) throw FormatError("tape: unsupported version");
  const auto count = r.get<std::uint64_t>();
  Tape tape;
  for (std::uint64_t id = 0; id < count; ++id) {
    const auto op = r.get<std::uint8_t>();
    if (op > static_cast<std::uint8_t>(OpKind::sum_of_squares)) throw FormatError("tape: unknown op");
    const bool requires_grad = r.get<std::uint8_t>() != 0;
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<Var> inputs(r.get<std::uint32_t>());
    for (auto& v : inputs) {
      const auto src = r.get<std::uint64_t>();
      if (src >= id) throw FormatError("tape: input does not precede its node");
      v = Var(&tape, src);
    }
    OpAttrs attrs;
    attrs.real = r.get<double>();
    const auto n_ints = r.get<std::uint64_t>();
    if (n_ints > r.remaining() / sizeof(std::int64_t)) throw FormatError("tape: truncated attrs");
    attrs.ints.resize(n_ints);
    r.get_array<std::int64_t>(attrs.ints);
    if (static_cast<OpKind>(op) == OpKind::leaf) {
      if (numel(shape) > r.remaining() / sizeof(double)) throw FormatError("tape: truncated leaf");
      std::vector<double> vs(numel(shape));
      r.get_array<double>(vs);
      tape.push_leaf(Tensor(shape, std::move(vs)), requires_grad);
    } else {
      tape.apply(static_cast<OpKind>(op), inputs, std::move(attrs));
      if (tape.nodes_.back().shape != shape) throw FormatError("tape: replayed shape mismatch");
    }
  }
  if (!r.done()) throw FormatError("tape: trailing bytes");
  return tape;
}

// ---------------------------------------------------------------- primitives

Var matmul(Var a, Var b) {
  const Var in[] = {a, b};
  return a.tape()->apply(OpKind::matmul, in);
}

Var add(Var a, Var b) {
  const Var in[] = {a, b};
  return a.tape()->apply(OpKind::add, in);
}

Var multiply(Var a, Var b) {
  const Var in[] = {a, b};
  return a.tape()->apply(OpKind::multiply, in);
}

Var scale(Var a, double s) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::scale, in, {s, {}});
}

Var softmax(Var a) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::softmax, in);
}

Var log_softmax(Var a) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::log_softmax, in);
}

Var layer_norm(Var x, double eps) {
  const Var in[] = {x};
  return x.tape()->apply(OpKind::layer_norm, in, {eps, {}});
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Var in[] = {x, gain, bias};
  return x.tape()->apply(OpKind::layer_norm, in, {eps, {}});
}

Var gelu(Var a) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::gelu, in);
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  const Var in[] = {table};
  return table.tape()->apply(OpKind::embedding_lookup, in, {0.0, {ids.begin(), ids.end()}});
}

Var reshape(Var a, const Shape& shape) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::reshape, in, {0.0, {shape.begin(), shape.end()}});
}

Var transpose(Var a) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::transpose, in);
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Var in[] = {a};
  return a.tape()->apply(
      OpKind::slice, in,
      {0.0, {static_cast<std::int64_t>(axis), static_cast<std::int64_t>(begin), static_cast<std::int64_t>(end)}});
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  return parts[0].tape()->apply(OpKind::concat, parts, {0.0, {static_cast<std::int64_t>(axis)}});
}

Var mean(Var a) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::mean, in);
}

Var sum_of_squares(Var a) {
  const Var in[] = {a};
  return a.tape()->apply(OpKind::sum_of_squares, in);
}

Var subtract(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

}  // namespace ddit
