#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// A Tape records every primitive applied during a forward pass. Nodes are
// appended in evaluation order, so the record is topologically sorted by
// construction and backward() is a single reverse sweep. Broadcasting is
// limited to scalar-tensor pairs; row broadcasting (bias addition) has its own
// primitive.
//
// Subgradient convention at kinks: relu and clamps pass gradient only on the
// strictly active side, so the boundary itself gets zero.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nidm::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_))
      throw ShapeError("tensor of shape " + shape_string(shape_) + " given " + std::to_string(values_.size()) +
                       " values");
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }
  static Tensor column(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n, 1}, std::move(v));
  }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  double item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Trainable tensor living outside any tape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}
  void zero_grad() { grad.fill(0.0); }
};

/// Ordered owner of parameters; addresses are stable.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value) {
    for (const auto& p : params_)
      if (p->name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value)));
    return *params_.back();
  }
  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }
  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  /// Differentiable input whose gradient is read back with grad().
  Var leaf(Tensor value) { return push(std::move(value), true, nullptr); }
  /// Differentiable input bound to a parameter; backward() accumulates into parameter.grad.
  Var param(Parameter& p) {
    Var v = push(p.value, true, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  /// Record a derived node. `inputs` decide whether it needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return record_if(std::move(value), rg, std::move(fn));
  }
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return record_if(std::move(value), rg, std::move(fn));
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated on first use; null for constants.
  Tensor* grad_slot(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor(n.value.shape(), 0.0);
    return &n.grad;
  }
  const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }

  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }

  void backward(Var output) {
    if (value(output).size() != 1)
      throw ShapeError("backward() needs a scalar output, got shape " + shape_string(value(output).shape()));
    if (!nodes_[output.id].requires_grad) return;
    grad_slot(output.id)->fill(1.0);
    for (std::uint32_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& pg = n.param->grad.storage();
        const auto& g = n.grad.storage();
        for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Smallest observed distance of a relu/clamp input from its kink.
  double kink_margin() const { return kink_margin_; }
  void note_kink_distance(double d) { kink_margin_ = std::min(kink_margin_, d); }

  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var record_if(Tensor value, bool requires_grad, BackwardFn fn) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(fn) : BackwardFn{});
  }

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    if (check_finite_ && !value.all_finite())
      throw NonFiniteError("non-finite value produced at tape node " + std::to_string(nodes_.size()) + " of shape " +
                           shape_string(value.shape()));
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr, std::move(fn)});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
  bool check_finite_ = true;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// primitives

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("vars recorded on different tapes");
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) throw ShapeError(std::string(op) + " needs a rank-2 tensor, got " + shape_string(t.shape()));
}

/// Broadcast layout for a binary elementwise op.
struct Broadcast {
  Shape out;
  bool a_scalar = false;
  bool b_scalar = false;
};

inline Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (b.size() == 1) return {a.shape(), false, true};
  if (a.size() == 1) return {b.shape(), true, false};
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

/// Elementwise binary op with derivatives da = df/da, db = df/db given (a, b, out).
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, name);
  Tensor out(bc.out);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bc.a_scalar ? 0 : i], bv[bc.b_scalar ? 0 : i]);
  const std::uint32_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib, bc, da, db](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& o = tp.value(self);
    const Tensor& x = tp.value(ia);
    const Tensor& y = tp.value(ib);
    const std::size_t n = g.size();
    if (Tensor* ga = tp.grad_slot(ia)) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ai = bc.a_scalar ? 0 : i, bi = bc.b_scalar ? 0 : i;
        (*ga)[ai] += g[i] * da(x[ai], y[bi], o[i]);
      }
    }
    if (Tensor* gb = tp.grad_slot(ib)) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ai = bc.a_scalar ? 0 : i, bi = bc.b_scalar ? 0 : i;
        (*gb)[bi] += g[i] * db(x[ai], y[bi], o[i]);
      }
    }
  });
}

/// Elementwise unary op with derivative d(x, out).
template <class F, class D>
Var unary(Var a, F f, D d) {
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::uint32_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, d](Tape& tp, std::uint32_t self) {
    Tensor* ga = tp.grad_slot(ia);
    if (!ga) return;
    const Tensor& g = tp.grad_of(self);
    const Tensor& o = tp.value(self);
    const Tensor& x = tp.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * d(x[i], o[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

inline Var scale(Var a, double k) {
  return detail::unary(a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

inline Var add_scalar(Var a, double k) {
  return detail::unary(a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var pow4(Var a) {
  return detail::unary(
      a, [](double x) { return x * x * x * x; }, [](double x, double) { return 4.0 * x * x * x; });
}

inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double, double o) { return 0.5 / o; });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double o) { return 1.0 - o * o; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, detail::stable_sigmoid, [](double, double o) { return o * (1.0 - o); });
}

inline Var softplus(Var a) {
  return detail::unary(a, detail::stable_softplus, [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Var relu(Var a) {
  for (double x : a.value().values()) a.tape->note_kink_distance(std::abs(x));
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// max(a, floor) elementwise; gradient passes only where a > floor.
inline Var clamp_below(Var a, double floor) {
  for (double x : a.value().values()) a.tape->note_kink_distance(std::abs(x - floor));
  return detail::unary(
      a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

/// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
inline Var clamp(Var a, double lo, double hi) {
  for (double x : a.value().values()) a.tape->note_kink_distance(std::min(std::abs(x - lo), std::abs(x - hi)));
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

/// Huber loss elementwise: 0.5 r^2 inside the threshold, linear outside.
inline Var huber(Var r, double threshold) {
  return detail::unary(
      r,
      [threshold](double x) {
        const double ax = std::abs(x);
        return ax <= threshold ? 0.5 * x * x : threshold * (ax - 0.5 * threshold);
      },
      [threshold](double x, double) { return std::clamp(x, -threshold, threshold); });
}

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const RowMat>;
  using MMap = Eigen::Map<RowMat>;
  const auto n = static_cast<Eigen::Index>(av.rows()), k = static_cast<Eigen::Index>(av.cols()),
             m = static_cast<Eigen::Index>(bv.cols());
  Tensor out({av.rows(), bv.cols()});
  MMap(out.data(), n, m).noalias() = CMap(av.data(), n, k) * CMap(bv.data(), k, m);
  const std::uint32_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& tp, std::uint32_t self) {
    CMap g(tp.grad_of(self).data(), n, m);
    if (Tensor* ga = tp.grad_slot(ia)) MMap(ga->data(), n, k).noalias() += g * CMap(tp.value(ib).data(), k, m).transpose();
    if (Tensor* gb = tp.grad_slot(ib)) MMap(gb->data(), k, m).noalias() += CMap(tp.value(ia).data(), n, k).transpose() * g;
  });
}

/// a (r x c) + row (1 x c), the row repeated for every row of a.
inline Var add_row(Var a, Var row) {
  detail::require_same_tape(a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  detail::require_rank2(av, "add_row");
  if (rv.shape() != Shape{1, av.cols()})
    throw ShapeError("add_row: row " + shape_string(rv.shape()) + " does not match " + shape_string(av.shape()));
  Tensor out = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
  const std::uint32_t ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), {a, row}, [ia, ir, r, c](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_of(self);
    if (Tensor* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gr = tp.grad_slot(ir))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gr)[j] += g[i * c + j];
  });
}

/// Column-wise concatenation of rank-2 tensors with equal row counts.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t r = parts.front().value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat");
    if (p.value().rows() != r)
      throw ShapeError("concat: row mismatch " + shape_string(parts.front().shape()) + " and " +
                       shape_string(p.shape()));
    total += p.value().cols();
  }
  Tensor out({r, total});
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t c = v.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * c, c, out.data() + i * total + off);
    off += c;
    ids.push_back(p.id);
    widths.push_back(c);
  }
  return parts.front().tape->record(std::move(out), parts, [ids, widths, r, total](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_of(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t c = widths[k];
      if (Tensor* gp = tp.grad_slot(ids[k]))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*gp)[i * c + j] += g[i * total + off + j];
      off += c;
    }
  });
}

/// Columns [begin, end) of a rank-2 tensor.
inline Var slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice");
  if (begin >= end || end > av.cols())
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_string(av.shape()));
  const std::size_t r = av.rows(), c = av.cols(), w = end - begin;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i) std::copy_n(av.data() + i * c + begin, w, out.data() + i * w);
  const std::uint32_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, r, c, w, begin](Tape& tp, std::uint32_t self) {
    Tensor* ga = tp.grad_slot(ia);
    if (!ga) return;
    const Tensor& g = tp.grad_of(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) (*ga)[i * c + begin + j] += g[i * w + j];
  });
}

inline Var reduce_sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.values()) s += x;
  const std::uint32_t ia = a.id;
  return a.tape->record(Tensor::scalar(s), {a}, [ia](Tape& tp, std::uint32_t self) {
    Tensor* ga = tp.grad_slot(ia);
    if (!ga) return;
    const double g = tp.grad_of(self)[0];
    for (double& x : ga->values()) x += g;
  });
}

inline Var reduce_mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(reduce_sum(a), 1.0 / n);
}

/// Per-row sum of a rank-2 tensor: (r x c) -> (r x 1).
inline Var row_sum(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "row_sum");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  const std::uint32_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, r, c](Tape& tp, std::uint32_t self) {
    Tensor* ga = tp.grad_slot(ia);
    if (!ga) return;
    const Tensor& g = tp.grad_of(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i];
  });
}

/// Row-wise softmax of a rank-2 tensor.
inline Var softmax(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "softmax");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = av.data() + i * c;
    double* y = out.data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  const std::uint32_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, r, c](Tape& tp, std::uint32_t self) {
    Tensor* ga = tp.grad_slot(ia);
    if (!ga) return;
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.value(self);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

/// Row-wise log-sum-exp: (r x c) -> (r x 1).
inline Var logsumexp_rows(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "logsumexp_rows");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = av.data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    out[i] = mx + std::log(z);
  }
  const std::uint32_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, r, c](Tape& tp, std::uint32_t self) {
    Tensor* ga = tp.grad_slot(ia);
    if (!ga) return;
    const Tensor& g = tp.grad_of(self);
    const Tensor& o = tp.value(self);
    const Tensor& x = tp.value(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i] * std::exp(x[i * c + j] - o[i]);
  });
}

/// Position after one constant-acceleration step with the zero-speed floor;
/// when the vehicle stops inside the step the travelled distance is v^2/(2|a|).
/// Pair with relu(v + a dt) for the speed.
inline Var advance_position(Var x, Var v, Var a, double dt) {
  detail::require_same_tape(x, v);
  detail::require_same_tape(x, a);
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  const Tensor& av = a.value();
  if (xv.shape() != vv.shape() || xv.shape() != av.shape())
    throw ShapeError("advance_position: shapes " + shape_string(xv.shape()) + ", " + shape_string(vv.shape()) +
                     ", " + shape_string(av.shape()));
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double vn = vv[i] + av[i] * dt;
    x.tape->note_kink_distance(std::abs(vn));
    out[i] = vn >= 0.0 ? xv[i] + vv[i] * dt + 0.5 * av[i] * dt * dt : xv[i] - vv[i] * vv[i] / (2.0 * av[i]);
  }
  const std::uint32_t ix = x.id, iv = v.id, ia = a.id;
  return x.tape->record(std::move(out), {x, v, a}, [ix, iv, ia, dt](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& vv = tp.value(iv);
    const Tensor& av = tp.value(ia);
    Tensor* gx = tp.grad_slot(ix);
    Tensor* gv = tp.grad_slot(iv);
    Tensor* ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool moving = vv[i] + av[i] * dt >= 0.0;
      if (gx) (*gx)[i] += g[i];
      if (gv) (*gv)[i] += g[i] * (moving ? dt : -vv[i] / av[i]);
      if (ga) (*ga)[i] += g[i] * (moving ? 0.5 * dt * dt : vv[i] * vv[i] / (2.0 * av[i] * av[i]));
    }
  });
}

// ---------------------------------------------------------------------------
// finite-difference checking

/// max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// The function must be kink-free within eps of the point.
inline double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& f, const std::vector<Tensor>& point,
                         double eps = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : point) leaves.push_back(tape.leaf(p));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const Var& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto evaluate = [&](const std::vector<Tensor>& pt) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : pt) leaves.push_back(tape.constant(p));
    return f(tape, leaves).item();
  };
  double worst = 0.0;
  std::vector<Tensor> probe = point;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + eps;
      const double up = evaluate(probe);
      probe[k][i] = orig - eps;
      const double down = evaluate(probe);
      probe[k][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

/// Gradient check over every parameter of a set. `loss` builds the scalar on
/// the given tape reading parameters through tape.param(). Returns the worst
/// relative error per parameter, in set order.
inline std::vector<double> grad_check(ParameterSet& params, const std::function<Var(Tape&)>& loss, double eps = 1e-5) {
  params.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  std::vector<double> worst(params.size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + eps;
      double up, down;
      {
        Tape tape;
        up = loss(tape).item();
      }
      p.value[i] = orig - eps;
      {
        Tape tape;
        down = loss(tape).item();
      }
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = p.grad[i];
      worst[k] = std::max(worst[k], std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace nidm::ad
