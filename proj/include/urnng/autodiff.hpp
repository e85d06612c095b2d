#pragma once

// Reverse-mode differentiation over a dynamic tape. Each primitive computes
// its value eagerly and, when any input needs a gradient, records a closure
// that propagates the output gradient back to its inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "urnng/random.hpp"
#include "urnng/tensor.hpp"

namespace urnng::ad {

/// A named trainable tensor with a persistent gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  double lr_scale = 1.0;  // per-parameter multiplier on the optimizer's rate

  Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  inline const Shape& shape() const;
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using GradientMap = std::vector<std::pair<Parameter*, Tensor>>;

/// The computation record. Not thread-safe; use one tape per task.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

  Var constant(Tensor value) { return push_node(std::move(value), false, nullptr, "constant"); }

  /// A differentiable input that is not a Parameter.
  Var leaf(Tensor value) { return push_node(std::move(value), recording_, nullptr, "leaf"); }

  /// The node for a parameter; repeated calls return the same node.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Node n;
    n.param = &p;
    n.requires_grad = recording_;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    return Var(this, id);
  }

  const Tensor& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param ? n.param->value : n.value;
  }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer of an input during backward, or nullptr when the input
  /// does not need one.
  Tensor* grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.requires_grad ? &n.grad : nullptr;
  }
  const Tensor& out_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  const Tensor& grad(Var v) const {
    check_owned(v, "grad");
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.requires_grad) throw std::invalid_argument("grad: node does not require a gradient");
    return n.grad;
  }

  /// Runs the record backward from a scalar root. Gradient buffers are zeroed
  /// first, so calling backward twice gives the same result.
  void backward(Var root) {
    check_owned(root, "backward");
    if (value(root.id()).size() != 1 || value(root.id()).rank() != 0)
      throw std::invalid_argument("backward: root must be a scalar, got shape " + value(root.id()).shape().str());
    if (!recording_) throw std::logic_error("backward: tape was not recording");
    for (auto& n : nodes_) {
      if (!n.requires_grad) continue;
      const Shape& s = n.param ? n.param->value.shape() : n.value.shape();
      if (n.grad.shape() == s)
        n.grad.fill(0.0);
      else
        n.grad = Tensor(s);
    }
    Node& r = nodes_[static_cast<std::size_t>(root.id())];
    if (!r.requires_grad) return;
    r.grad[0] = 1.0;
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.backward) n.backward(*this, id);
    }
  }

  /// Gradients of the last backward pass for every parameter used on this tape,
  /// in first-use order.
  GradientMap param_grads() const {
    GradientMap out;
    for (const auto& n : nodes_)
      if (n.param && n.requires_grad) out.emplace_back(n.param, n.grad);
    return out;
  }

  /// Adds the last backward pass's parameter gradients into Parameter::grad.
  void accumulate_param_grads() const {
    for (const auto& n : nodes_) {
      if (!n.param || !n.requires_grad) continue;
      double* dst = n.param->grad.data();
      const double* src = n.grad.data();
      for (std::size_t i = 0, e = n.grad.size(); i < e; ++i) dst[i] += src[i];
    }
  }

  /// Appends a primitive's output. `bw` is kept only when a gradient can flow.
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward bw, const char* name) {
    bool rg = false;
    for (const Var& in : inputs) {
      check_owned(in, name);
      rg = rg || requires_grad(in.id());
    }
    return push_node(std::move(value), rg && recording_, rg && recording_ ? std::move(bw) : nullptr, name);
  }

  Var push(Tensor value, const std::vector<Var>& inputs, Backward bw, const char* name) {
    bool rg = false;
    for (const Var& in : inputs) {
      check_owned(in, name);
      rg = rg || requires_grad(in.id());
    }
    return push_node(std::move(value), rg && recording_, rg && recording_ ? std::move(bw) : nullptr, name);
  }

  void check_owned(const Var& v, const char* what) const {
    if (v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size())
      throw std::invalid_argument(std::string(what) + ": variable is not on this tape");
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push_node(Tensor value, bool rg, Backward bw, const char* name) {
    if (!value.all_finite()) throw NumericError(std::string(name) + ": non-finite output");
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool recording_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }

namespace detail {

[[noreturn]] inline void shape_error(const char* prim, const std::string& detail) {
  throw std::invalid_argument(std::string(prim) + ": shape mismatch, " + detail);
}

inline void require_same(const char* prim, const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(prim) + ": operands live on different tapes");
  if (a.shape() != b.shape()) shape_error(prim, a.shape().str() + " vs " + b.shape().str());
}

inline void require_rank(const char* prim, const Var& a, std::size_t rank) {
  if (a.shape().rank() != rank)
    shape_error(prim, "expected rank " + std::to_string(rank) + ", got " + a.shape().str());
}

// dydx(x, y) gives the local derivative from the input and output values.
template <class F, class D>
Var unary(const char* prim, Var x, F fwd, D dydx) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const int xi = x.id();
  return t.push(std::move(out), {x},
                [xi, dydx](Tape& t, int self) {
                  Tensor* gx = t.grad_of(xi);
                  if (!gx) return;
                  const Tensor& xv = t.value(xi);
                  const Tensor& y = t.value(self);
                  const Tensor& g = t.out_grad(self);
                  for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * dydx(xv[i], y[i]);
                },
                prim);
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }

// Four independent partial sums; fixed summation order, so still deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  for (; k < n; ++k) s0 += a[k] * b[k];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) y[k] += alpha * x[k];
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same("add", a, b);
  Tensor out(a.shape());
  const Tensor &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ai = a.id(), bi = b.id();
  return a.tape()->push(std::move(out), {a, b},
                        [ai, bi](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          if (Tensor* ga = t.grad_of(ai))
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                          if (Tensor* gb = t.grad_of(bi))
                            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
                        },
                        "add");
}

inline Var sub(Var a, Var b) {
  detail::require_same("sub", a, b);
  Tensor out(a.shape());
  const Tensor &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ai = a.id(), bi = b.id();
  return a.tape()->push(std::move(out), {a, b},
                        [ai, bi](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          if (Tensor* ga = t.grad_of(ai))
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                          if (Tensor* gb = t.grad_of(bi))
                            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                        },
                        "sub");
}

inline Var mul(Var a, Var b) {
  detail::require_same("mul", a, b);
  Tensor out(a.shape());
  const Tensor &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ai = a.id(), bi = b.id();
  return a.tape()->push(std::move(out), {a, b},
                        [ai, bi](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          const Tensor &av = t.value(ai), &bv = t.value(bi);
                          if (Tensor* ga = t.grad_of(ai))
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
                          if (Tensor* gb = t.grad_of(bi))
                            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
                        },
                        "mul");
}

/// x * c for a constant c.
inline Var scale(Var x, double c) {
  return detail::unary("scale", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

/// x + c for a constant c.
inline Var shift(Var x, double c) {
  return detail::unary("shift", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var sigmoid(Var x) {
  return detail::unary("sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Var exp(Var x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// log(sigmoid(x)), stable for large |x|.
inline Var log_sigmoid(Var x) {
  return detail::unary("log_sigmoid", x, detail::log_sigmoid,
                       [](double v, double) { return detail::stable_sigmoid(-v); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return shift(a, c); }
inline Var operator-(Var a, double c) { return shift(a, -c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// ---- linear algebra -------------------------------------------------------

/// A[m,n]·x[n] -> [m], or A[m,n]·B[n,p] -> [m,p].
inline Var matmul(Var a, Var b) {
  detail::require_rank("matmul", a, 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const Tensor &av = a.value(), &bv = b.value();
  if (b.shape().rank() == 1) {
    if (b.shape()[0] != n) detail::shape_error("matmul", a.shape().str() + " x " + b.shape().str());
    Tensor out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = av.data() + i * n;
      out[i] = detail::dot(row, bv.data(), n);
    }
    const int ai = a.id(), bi = b.id();
    return a.tape()->push(std::move(out), {a, b},
                          [ai, bi, m, n](Tape& t, int self) {
                            const Tensor& g = t.out_grad(self);
                            const Tensor &av = t.value(ai), &bv = t.value(bi);
                            if (Tensor* ga = t.grad_of(ai))
                              for (std::size_t i = 0; i < m; ++i) detail::axpy(g[i], bv.data(), ga->data() + i * n, n);
                            if (Tensor* gb = t.grad_of(bi))
                              for (std::size_t i = 0; i < m; ++i) detail::axpy(g[i], av.data() + i * n, gb->data(), n);
                          },
                          "matmul");
  }
  detail::require_rank("matmul", b, 2);
  if (b.shape()[0] != n) detail::shape_error("matmul", a.shape().str() + " x " + b.shape().str());
  const std::size_t p = b.shape()[1];
  Tensor out(Shape{m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = av[i * n + k];
      const double* brow = bv.data() + k * p;
      double* orow = out.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  const int ai = a.id(), bi = b.id();
  return a.tape()->push(std::move(out), {a, b},
                        [ai, bi, m, n, p](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          const Tensor &av = t.value(ai), &bv = t.value(bi);
                          if (Tensor* ga = t.grad_of(ai))
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t k = 0; k < n; ++k) {
                                double s = 0.0;
                                for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * bv[k * p + j];
                                (*ga)[i * n + k] += s;
                              }
                          if (Tensor* gb = t.grad_of(bi))
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t k = 0; k < n; ++k) {
                                const double aik = av[i * n + k];
                                for (std::size_t j = 0; j < p; ++j) (*gb)[k * p + j] += aik * g[i * p + j];
                              }
                        },
                        "matmul");
}

/// Affine map. x[n] -> W x + b with W[m,n], b[m]; x[r,n] -> x Wᵀ + b per row.
inline Var linear(Var x, Var w, Var b) {
  detail::require_rank("linear", w, 2);
  const std::size_t m = w.shape()[0], n = w.shape()[1];
  if (b.shape() != Shape{m}) detail::shape_error("linear", "bias " + b.shape().str() + " for weight " + w.shape().str());
  const bool vec = x.shape().rank() == 1;
  if (!(vec && x.shape()[0] == n) && !(x.shape().rank() == 2 && x.shape()[1] == n))
    detail::shape_error("linear", "input " + x.shape().str() + " for weight " + w.shape().str());
  const std::size_t r = vec ? 1 : x.shape()[0];
  const Tensor &xv = x.value(), &wv = w.value(), &bv = b.value();
  Tensor out(vec ? Shape{m} : Shape{r, m});
  for (std::size_t row = 0; row < r; ++row) {
    const double* xr = xv.data() + row * n;
    double* orow = out.data() + row * m;
    for (std::size_t i = 0; i < m; ++i) {
      orow[i] = bv[i] + detail::dot(wv.data() + i * n, xr, n);
    }
  }
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape()->push(std::move(out), {x, w, b},
                        [xi, wi, bi, m, n, r](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          const Tensor &xv = t.value(xi), &wv = t.value(wi);
                          Tensor* gx = t.grad_of(xi);
                          Tensor* gw = t.grad_of(wi);
                          Tensor* gb = t.grad_of(bi);
                          for (std::size_t row = 0; row < r; ++row) {
                            const double* gr = g.data() + row * m;
                            const double* xr = xv.data() + row * n;
                            for (std::size_t i = 0; i < m; ++i) {
                              const double gi = gr[i];
                              if (gi == 0.0) continue;
                              if (gb) (*gb)[i] += gi;
                              if (gw) detail::axpy(gi, xr, gw->data() + i * n, n);
                              if (gx) detail::axpy(gi, wv.data() + i * n, gx->data() + row * n, n);
                            }
                          }
                        },
                        "linear");
}

inline Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.values()) s += v;
  const int xi = x.id();
  return x.tape()->push(Tensor::scalar(s), {x},
                        [xi](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const double g = t.out_grad(self)[0];
                          for (double& v : gx->values()) v += g;
                        },
                        "sum");
}

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

// ---- normalizers -----------------------------------------------------------

namespace detail {
inline double lse(const double* x, std::size_t n, std::size_t stride = 1) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i * stride]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - m);
  return m + std::log(s);
}
}  // namespace detail

/// log Σ exp over all entries of a vector -> scalar.
inline Var logsumexp(Var x) {
  detail::require_rank("logsumexp", x, 1);
  if (x.shape()[0] == 0) detail::shape_error("logsumexp", "empty input");
  const Tensor& xv = x.value();
  const double out = detail::lse(xv.data(), xv.size());
  const int xi = x.id();
  return x.tape()->push(Tensor::scalar(out), {x},
                        [xi](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& xv = t.value(xi);
                          const double y = t.value(self)[0], g = t.out_grad(self)[0];
                          for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += g * std::exp(xv[i] - y);
                        },
                        "logsumexp");
}

/// log Σ exp over one axis of a matrix (axis 1 -> one value per row).
inline Var logsumexp(Var x, std::size_t axis) {
  if (x.shape().rank() == 1 && axis == 0) return logsumexp(x);
  detail::require_rank("logsumexp", x, 2);
  if (axis > 1) detail::shape_error("logsumexp", "axis " + std::to_string(axis) + " for " + x.shape().str());
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const std::size_t outer = axis == 1 ? rows : cols, inner = axis == 1 ? cols : rows;
  const std::size_t stride = axis == 1 ? 1 : cols;
  const Tensor& xv = x.value();
  Tensor out(Shape{outer});
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = axis == 1 ? o * cols : o;
    out[o] = detail::lse(xv.data() + base, inner, stride);
  }
  const int xi = x.id();
  return x.tape()->push(std::move(out), {x},
                        [xi, axis, outer, inner, stride, cols](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor &xv = t.value(xi), &y = t.value(self), &g = t.out_grad(self);
                          for (std::size_t o = 0; o < outer; ++o) {
                            const std::size_t base = axis == 1 ? o * cols : o;
                            for (std::size_t k = 0; k < inner; ++k) {
                              const std::size_t idx = base + k * stride;
                              (*gx)[idx] += g[o] * std::exp(xv[idx] - y[o]);
                            }
                          }
                        },
                        "logsumexp");
}

inline Var log_softmax(Var x) {
  detail::require_rank("log_softmax", x, 1);
  const Tensor& xv = x.value();
  const double z = detail::lse(xv.data(), xv.size());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] - z;
  const int xi = x.id();
  return x.tape()->push(std::move(out), {x},
                        [xi](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor &y = t.value(self), &g = t.out_grad(self);
                          double gs = 0.0;
                          for (double v : g.values()) gs += v;
                          for (std::size_t i = 0; i < y.size(); ++i) (*gx)[i] += g[i] - std::exp(y[i]) * gs;
                        },
                        "log_softmax");
}

inline Var softmax(Var x) {
  detail::require_rank("softmax", x, 1);
  const Tensor& xv = x.value();
  const double z = detail::lse(xv.data(), xv.size());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i] - z);
  const int xi = x.id();
  return x.tape()->push(std::move(out), {x},
                        [xi](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor &y = t.value(self), &g = t.out_grad(self);
                          double gy = 0.0;
                          for (std::size_t i = 0; i < y.size(); ++i) gy += g[i] * y[i];
                          for (std::size_t i = 0; i < y.size(); ++i) (*gx)[i] += y[i] * (g[i] - gy);
                        },
                        "softmax");
}

/// Normalizes each row (or the single vector) to zero mean and unit variance,
/// then applies a per-column gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  if (x.shape().rank() == 0) detail::shape_error("layer_norm", "scalar input");
  const std::size_t n = x.value().cols(), r = x.value().rows();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
    detail::shape_error("layer_norm", "input " + x.shape().str() + " with gain " + gain.shape().str() + " bias " +
                                          bias.shape().str());
  const Tensor &xv = x.value(), &gv = gain.value(), &bv = bias.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size()), inv_std(r);
  for (std::size_t row = 0; row < r; ++row) {
    const double* xr = xv.data() + row * n;
    double mu = 0.0;
    for (std::size_t k = 0; k < n; ++k) mu += xr[k];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= static_cast<double>(n);
    inv_std[row] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < n; ++k) {
      const double h = (xr[k] - mu) * inv_std[row];
      xhat[row * n + k] = h;
      out[row * n + k] = gv[k] * h + bv[k];
    }
  }
  const int xi = x.id(), gi = gain.id(), bi = bias.id();
  return x.tape()->push(std::move(out), {x, gain, bias},
                        [xi, gi, bi, n, r, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          const Tensor& gv = t.value(gi);
                          Tensor* gx = t.grad_of(xi);
                          Tensor* gg = t.grad_of(gi);
                          Tensor* gb = t.grad_of(bi);
                          std::vector<double> dh(n);
                          for (std::size_t row = 0; row < r; ++row) {
                            const double* gr = g.data() + row * n;
                            const double* hr = xhat.data() + row * n;
                            double mean_dh = 0.0, mean_dh_h = 0.0;
                            for (std::size_t k = 0; k < n; ++k) {
                              if (gg) (*gg)[k] += gr[k] * hr[k];
                              if (gb) (*gb)[k] += gr[k];
                              dh[k] = gr[k] * gv[k];
                              mean_dh += dh[k];
                              mean_dh_h += dh[k] * hr[k];
                            }
                            if (!gx) continue;
                            mean_dh /= static_cast<double>(n);
                            mean_dh_h /= static_cast<double>(n);
                            double* xg = gx->data() + row * n;
                            for (std::size_t k = 0; k < n; ++k)
                              xg[k] += inv_std[row] * (dh[k] - mean_dh - hr[k] * mean_dh_h);
                          }
                        },
                        "layer_norm");
}

/// Inverted dropout: in training mode each entry is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); otherwise the identity.
inline Var dropout(Var x, double rate, Rng* rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  if (!rng) throw std::invalid_argument("dropout: training mode requires an RNG");
  const Tensor& xv = x.value();
  std::vector<double> mask(xv.size());
  const double keep = 1.0 / (1.0 - rate);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = uniform01(*rng) < rate ? 0.0 : keep;
    out[i] = xv[i] * mask[i];
  }
  const int xi = x.id();
  return x.tape()->push(std::move(out), {x},
                        [xi, mask = std::move(mask)](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& g = t.out_grad(self);
                          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask[i];
                        },
                        "dropout");
}

// ---- structural ------------------------------------------------------------

/// Joins scalars and vectors end to end into one vector.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) detail::shape_error("concat", "no inputs");
  std::vector<double> out;
  std::vector<std::pair<int, std::size_t>> spans;  // (node id, length)
  for (const Var& p : parts) {
    if (p.shape().rank() > 1) detail::shape_error("concat", "input " + p.shape().str() + " is not a vector");
    if (p.tape() != parts.front().tape()) throw std::invalid_argument("concat: operands live on different tapes");
    const Tensor& v = p.value();
    out.insert(out.end(), v.values().begin(), v.values().end());
    spans.emplace_back(p.id(), v.size());
  }
  return parts.front().tape()->push(Tensor::vector(std::move(out)), parts,
                                    [spans = std::move(spans)](Tape& t, int self) {
                                      const Tensor& g = t.out_grad(self);
                                      std::size_t off = 0;
                                      for (auto [id, len] : spans) {
                                        if (Tensor* gp = t.grad_of(id))
                                          for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[off + i];
                                        off += len;
                                      }
                                    },
                                    "concat");
}

/// Stacks vectors (one row each) and matrices (all their rows) into a matrix.
inline Var stack_rows(const std::vector<Var>& parts) {
  if (parts.empty()) detail::shape_error("stack_rows", "no inputs");
  const std::size_t cols = parts.front().value().cols();
  std::vector<double> out;
  std::vector<std::pair<int, std::size_t>> spans;
  for (const Var& p : parts) {
    if (p.shape().rank() == 0 || p.value().cols() != cols)
      detail::shape_error("stack_rows", "row width " + std::to_string(cols) + " vs input " + p.shape().str());
    const Tensor& v = p.value();
    out.insert(out.end(), v.values().begin(), v.values().end());
    spans.emplace_back(p.id(), v.size());
  }
  const std::size_t rows = out.size() / cols;
  return parts.front().tape()->push(Tensor::matrix(rows, cols, std::move(out)), parts,
                                    [spans = std::move(spans)](Tape& t, int self) {
                                      const Tensor& g = t.out_grad(self);
                                      std::size_t off = 0;
                                      for (auto [id, len] : spans) {
                                        if (Tensor* gp = t.grad_of(id))
                                          for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[off + i];
                                        off += len;
                                      }
                                    },
                                    "stack_rows");
}

/// [r,a] ++ [r,b] -> [r,a+b].
inline Var concat_cols(Var a, Var b) {
  detail::require_rank("concat_cols", a, 2);
  detail::require_rank("concat_cols", b, 2);
  const std::size_t r = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  if (b.shape()[0] != r) detail::shape_error("concat_cols", a.shape().str() + " vs " + b.shape().str());
  const Tensor &av = a.value(), &bv = b.value();
  Tensor out(Shape{r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(bv.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  const int ai = a.id(), bi = b.id();
  return a.tape()->push(std::move(out), {a, b},
                        [ai, bi, r, ca, cb](Tape& t, int self) {
                          const Tensor& g = t.out_grad(self);
                          Tensor* ga = t.grad_of(ai);
                          Tensor* gb = t.grad_of(bi);
                          for (std::size_t i = 0; i < r; ++i) {
                            const double* gr = g.data() + i * (ca + cb);
                            if (ga)
                              for (std::size_t k = 0; k < ca; ++k) (*ga)[i * ca + k] += gr[k];
                            if (gb)
                              for (std::size_t k = 0; k < cb; ++k) (*gb)[i * cb + k] += gr[ca + k];
                          }
                        },
                        "concat_cols");
}

/// Contiguous piece [begin, begin+len) of a vector.
inline Var slice(Var x, std::size_t begin, std::size_t len) {
  detail::require_rank("slice", x, 1);
  if (begin + len > x.shape()[0])
    detail::shape_error("slice", "range [" + std::to_string(begin) + ", " + std::to_string(begin + len) + ") of " +
                                     x.shape().str());
  const Tensor& xv = x.value();
  std::vector<double> out(xv.data() + begin, xv.data() + begin + len);
  const int xi = x.id();
  return x.tape()->push(Tensor::vector(std::move(out)), {x},
                        [xi, begin, len](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& g = t.out_grad(self);
                          for (std::size_t i = 0; i < len; ++i) (*gx)[begin + i] += g[i];
                        },
                        "slice");
}

/// Selects rows of a matrix by index (embedding lookup when x is a table).
inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
  detail::require_rank("gather_rows", x, 2);
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const Tensor& xv = x.value();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n)
      detail::shape_error("gather_rows", "row " + std::to_string(rows[i]) + " of " + x.shape().str());
    std::copy_n(xv.data() + rows[i] * c, c, out.data() + i * c);
  }
  const int xi = x.id();
  return x.tape()->push(std::move(out), {x},
                        [xi, c, rows = std::move(rows)](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& g = t.out_grad(self);
                          for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t k = 0; k < c; ++k) (*gx)[rows[i] * c + k] += g[i * c + k];
                        },
                        "gather_rows");
}

/// One row of a matrix as a vector.
inline Var row(Var x, std::size_t r) {
  detail::require_rank("row", x, 2);
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (r >= n) detail::shape_error("row", "row " + std::to_string(r) + " of " + x.shape().str());
  const Tensor& xv = x.value();
  std::vector<double> out(xv.data() + r * c, xv.data() + (r + 1) * c);
  const int xi = x.id();
  return x.tape()->push(Tensor::vector(std::move(out)), {x},
                        [xi, r, c](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& g = t.out_grad(self);
                          for (std::size_t k = 0; k < c; ++k) (*gx)[r * c + k] += g[k];
                        },
                        "row");
}

inline Var embedding(Var table, std::size_t id) { return row(table, id); }

/// Entries of a vector by index, as a vector.
inline Var gather(Var x, std::vector<std::size_t> idx) {
  detail::require_rank("gather", x, 1);
  const Tensor& xv = x.value();
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.size()) detail::shape_error("gather", "index " + std::to_string(idx[i]) + " of " + x.shape().str());
    out[i] = xv[idx[i]];
  }
  const int xi = x.id();
  return x.tape()->push(Tensor::vector(std::move(out)), {x},
                        [xi, idx = std::move(idx)](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& g = t.out_grad(self);
                          for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[idx[i]] += g[i];
                        },
                        "gather");
}

/// One entry of a vector as a scalar.
inline Var pick(Var x, std::size_t i) {
  detail::require_rank("pick", x, 1);
  if (i >= x.shape()[0]) detail::shape_error("pick", "index " + std::to_string(i) + " of " + x.shape().str());
  const int xi = x.id();
  return x.tape()->push(Tensor::scalar(x.value()[i]), {x},
                        [xi, i](Tape& t, int self) {
                          if (Tensor* gx = t.grad_of(xi)) (*gx)[i] += t.out_grad(self)[0];
                        },
                        "pick");
}

inline Var reshape(Var x, Shape shape) {
  if (shape.numel() != x.value().size())
    detail::shape_error("reshape", x.shape().str() + " -> " + shape.str());
  Tensor out(shape, x.value().storage());
  const int xi = x.id();
  return x.tape()->push(std::move(out), {x},
                        [xi](Tape& t, int self) {
                          Tensor* gx = t.grad_of(xi);
                          if (!gx) return;
                          const Tensor& g = t.out_grad(self);
                          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                        },
                        "reshape");
}

// ---- gradient checking -------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "param[index]" of the largest error
  bool passed = false;
};

/// Compares backward() against central finite differences for every
/// coordinate of `params`. The relative error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
/// coordinates whose true gradient is ~0 from dividing round-off by zero.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                                  double step = 1e-5, double tolerance = 1e-4, double floor = 1e-4) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  auto eval = [&]() {
    Tape t(false);
    return f(t).item();
  };
  GradientMap analytic;
  {
    Tape t;
    Var root = f(t);
    const double again = eval();
    if (root.item() != again) throw std::runtime_error("grad_check: function is not deterministic");
    t.backward(root);
    analytic = t.param_grads();
  }
  GradCheckReport rep;
  for (Parameter* p : params) {
    const Tensor* g = nullptr;
    for (auto& [q, gt] : analytic)
      if (q == p) g = &gt;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = eval();
      p->value[i] = orig - step;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g ? (*g)[i] : 0.0;
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++rep.coordinates;
      if (err > rep.max_rel_error || rep.worst.empty()) {
        if (err >= rep.max_rel_error) {
          rep.max_rel_error = err;
          rep.worst = p->name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  rep.passed = rep.max_rel_error < tolerance;
  return rep;
}

}  // namespace urnng::ad
