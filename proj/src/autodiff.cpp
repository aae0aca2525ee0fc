// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "lipdistill/kernels.hpp"

namespace lipdistill::ad {

// ---- Var / Tape ---------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Tensor value, bool requires_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) { return push(std::move(value), true, nullptr); }

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  bool tracked = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::logic_error("op mixes values from different tapes");
    tracked = tracked || v.requires_grad();
  }
  return push(std::move(value), tracked, std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  bool tracked = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::logic_error("op mixes values from different tapes");
    tracked = tracked || v.requires_grad();
  }
  return push(std::move(value), tracked, std::move(backward));
}

Tensor& Tape::accumulator(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
  if (backward_done_) throw std::logic_error("backward already ran on this tape");
  if (loss.value().size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw std::invalid_argument("backward on an untracked value");
  backward_done_ = true;
  accumulator(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.has_grad && node.backward) node.backward(*this, i);
  }
}

Tensor Tape::gradient(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.has_grad) return node.grad;
  return Tensor(node.value.shape(), 0.0);
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_to_string(a) +
                              " and " + shape_to_string(b));
}

// ---- broadcasting -----------------------------------------------------------

enum class Mode { kFull, kScalar, kRow };

struct Layout {
  Shape out;
  Mode a = Mode::kFull;
  Mode b = Mode::kFull;
  std::size_t row = 1;
};

bool trailing_one(const Shape& small, const Shape& big) {
  if (small.size() != big.size() || small.empty() || small.back() != 1) return false;
  return std::equal(small.begin(), small.end() - 1, big.begin());
}

Layout broadcast_layout(const char* op, const Shape& a, const Shape& b) {
  Layout l;
  if (a == b) {
    l.out = a;
  } else if (shape_size(b) == 1) {
    l.out = a;
    l.b = Mode::kScalar;
  } else if (shape_size(a) == 1) {
    l.out = b;
    l.a = Mode::kScalar;
  } else if (trailing_one(b, a)) {
    l.out = a;
    l.b = Mode::kRow;
    l.row = a.back();
  } else if (trailing_one(a, b)) {
    l.out = b;
    l.a = Mode::kRow;
    l.row = b.back();
  } else {
    shape_error(op, a, b);
  }
  return l;
}

inline std::size_t map_index(Mode m, std::size_t i, std::size_t row) {
  switch (m) {
    case Mode::kFull: return i;
    case Mode::kScalar: return 0;
    case Mode::kRow: return i / row;
  }
  return i;
}

template <typename Fwd, typename Bwd>
Var binary(const char* name, Var a, Var b, Fwd fwd, Bwd bwd) {
  const Layout l = broadcast_layout(name, a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(l.out);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(av[map_index(l.a, i, l.row)], bv[map_index(l.b, i, l.row)]);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [l, ia, ib, bwd](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
    Tensor* ga = need_a ? &t.accumulator(ia) : nullptr;
    Tensor* gb = need_b ? &t.accumulator(ib) : nullptr;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ja = map_index(l.a, i, l.row), jb = map_index(l.b, i, l.row);
      double da = 0.0, db = 0.0;
      bwd(g[i], av[ja], bv[jb], da, db);
      if (ga) (*ga)[ja] += da;
      if (gb) (*gb)[jb] += db;
    }
  });
}

// Unary op whose local derivative is expressed via input x and output y.
template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, deriv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& gx = t.accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(x[i], y[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Split {
  std::size_t outer, len, inner;
};

Split split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw std::invalid_argument("invalid axis " + std::to_string(axis) + " for shape " +
                                shape_to_string(s));
  }
  Split r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  return out;
}

Var reduce_sum(Var a, std::size_t axis, double factor) {
  const Split sp = split_axis(a.shape(), axis);
  const Tensor& av = a.value();
  Tensor out(drop_axis(a.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < sp.len; ++l) {
      const double* src = av.raw() + (o * sp.len + l) * sp.inner;
      double* dst = out.raw() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  if (factor != 1.0) {
    for (double& v : out.data()) v *= factor;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, sp, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.accumulator(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t l = 0; l < sp.len; ++l) {
        double* dst = ga.raw() + (o * sp.len + l) * sp.inner;
        const double* src = g.raw() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += factor * src[i];
      }
    }
  });
}

std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0) throw std::invalid_argument("operation needs at least one axis");
  return t.shape().back();
}

void reject_nan(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (std::isnan(v)) throw NonFiniteError(std::string(op) + ": NaN input");
  }
}

}  // namespace

// ---- elementwise --------------------------------------------------------------

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = g;
      });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) {
      throw std::domain_error("log of non-positive value " + std::to_string(v));
    }
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var neg(Var a) { return scale(a, -1.0); }

// ---- linear algebra -----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    shape_error("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  kernels::gemm_nn(av.raw(), bv.raw(), out.raw(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      kernels::gemm_nt(g.raw(), t.value(ib).raw(), t.accumulator(ia).raw(), m, n, k);
    }
    if (t.requires_grad(ib)) {
      kernels::gemm_tn(t.value(ia).raw(), g.raw(), t.accumulator(ib).raw(), m, k, n);
    }
  });
}

Var add_bias(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || av.rank() == 0 || av.shape().back() != bv.dim(0)) {
    shape_error("add_bias", av.shape(), bv.shape());
  }
  const std::size_t n = bv.dim(0), rows = av.size() / n;
  Tensor out = av;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, n, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.accumulator(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulator(ib);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    }
  });
}

// ---- reductions ---------------------------------------------------------------

Var sum(Var a, std::size_t axis) { return reduce_sum(a, axis, 1.0); }

Var mean(Var a, std::size_t axis) {
  const Split sp = split_axis(a.shape(), axis);
  return reduce_sum(a, axis, 1.0 / static_cast<double>(sp.len));
}

Var max(Var a, std::size_t axis) {
  const Split sp = split_axis(a.shape(), axis);
  const Tensor& av = a.value();
  Tensor out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.len * sp.inner + i;
      for (std::size_t l = 1; l < sp.len; ++l) {
        const std::size_t idx = (o * sp.len + l) * sp.inner + i;
        if (av[idx] > av[best]) best = idx;
      }
      out[o * sp.inner + i] = av[best];
      arg[o * sp.inner + i] = best;
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, arg = std::move(arg)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[arg[i]] += g[i];
  });
}

Var sum_all(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.accumulator(ia).data()) v += g;
  });
}

Var mean_all(Var a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

// ---- normalisation ------------------------------------------------------------

Var softmax(Var a) {
  const Tensor& av = a.value();
  reject_nan(av, "softmax");
  const std::size_t n = last_dim(av), rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.raw() + r * n;
    double* y = out.raw() + r * n;
    const double m = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, n, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accumulator(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  const Tensor& av = a.value();
  reject_nan(av, "log_softmax");
  const std::size_t n = last_dim(av), rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.raw() + r * n;
    double* y = out.raw() + r * n;
    const double m = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lz;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, n, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accumulator(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        ga[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
      }
    }
  });
}

// ---- shape --------------------------------------------------------------------

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw std::invalid_argument("transpose expects a 2-D tensor");
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.accumulator(ia);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() == 0 || begin >= end || end > av.dim(0)) {
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for shape " +
                                shape_to_string(av.shape()));
  }
  const std::size_t stride = av.size() / av.dim(0);
  Shape shape = av.shape();
  shape[0] = end - begin;
  std::vector<double> data(av.raw() + begin * stride, av.raw() + end * stride);
  const std::size_t ia = a.id();
  return a.tape().record(Tensor(std::move(shape), std::move(data)), {a},
                         [ia, begin, stride](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           double* dst = t.accumulator(ia).raw() + begin * stride;
                           for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != 2 || v.dim(0) != rows) shape_error("concat_cols", parts[0].shape(), v.shape());
    widths.push_back(v.dim(1));
    total += v.dim(1);
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.raw() + r * widths[p], widths[p], out.raw() + r * total + offset);
    }
    offset += widths[p];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(out), parts, [ids, widths, rows, total](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (t.requires_grad(ids[p])) {
            Tensor& gp = t.accumulator(ids[p]);
            for (std::size_t r = 0; r < rows; ++r) {
              const double* src = g.raw() + r * total + offset;
              double* dst = gp.raw() + r * widths[p];
              for (std::size_t j = 0; j < widths[p]; ++j) dst[j] += src[j];
            }
          }
          offset += widths[p];
        }
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> data;
  std::vector<std::size_t> ids, sizes;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() == 0 || Shape(v.shape().begin() + 1, v.shape().end()) != tail) {
      shape_error("concat_rows", parts[0].shape(), v.shape());
    }
    rows += v.dim(0);
    data.insert(data.end(), v.data().begin(), v.data().end());
    ids.push_back(p.id());
    sizes.push_back(v.size());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return parts[0].tape().record(Tensor(std::move(shape), std::move(data)), parts,
                                [ids, sizes](Tape& t, std::size_t self) {
                                  const Tensor& g = t.grad(self);
                                  std::size_t offset = 0;
                                  for (std::size_t p = 0; p < ids.size(); ++p) {
                                    if (t.requires_grad(ids[p])) {
                                      Tensor& gp = t.accumulator(ids[p]);
                                      for (std::size_t i = 0; i < sizes[p]; ++i) {
                                        gp[i] += g[offset + i];
                                      }
                                    }
                                    offset += sizes[p];
                                  }
                                });
}

// ---- stochastic ---------------------------------------------------------------

Var dropout(Var a, double rate, std::mt19937_64& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0, 1)");
  }
  if (!training || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(a.shape());
  for (double& m : mask.data()) m = keep(rng) ? keep_scale : 0.0;
  return mul(a, a.tape().constant(std::move(mask)));
}

// ---- convolution --------------------------------------------------------------

namespace {

// Column matrix [Cin·K·K × H·W] of one sample for a same-padded K×K window.
void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            double* col) {
  const long pad = static_cast<long>(k / 2);
  const long hl = static_cast<long>(h), wl = static_cast<long>(w);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
        double* dst = col + ((c * k + ky) * k + kx) * h * w;
        for (long y = 0; y < hl; ++y) {
          const long sy = y + dy;
          for (long xx = 0; xx < wl; ++xx) {
            const long sx = xx + dx;
            dst[y * wl + xx] = (sy >= 0 && sy < hl && sx >= 0 && sx < wl)
                                   ? x[(c * h + sy) * w + sx]
                                   : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            double* x) {
  const long pad = static_cast<long>(k / 2);
  const long hl = static_cast<long>(h), wl = static_cast<long>(w);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
        const double* src = col + ((c * k + ky) * k + kx) * h * w;
        for (long y = 0; y < hl; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= hl) continue;
          for (long xx = 0; xx < wl; ++xx) {
            const long sx = xx + dx;
            if (sx >= 0 && sx < wl) x[(c * h + sy) * w + sx] += src[y * wl + xx];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1 || wv.dim(1) != xv.dim(1) ||
      wv.dim(2) != wv.dim(3) || wv.dim(2) % 2 == 0 || bv.dim(0) != wv.dim(0)) {
    shape_error("conv2d", xv.shape(), wv.shape());
  }
  const std::size_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  const std::size_t plane = h * wd, patch = cin * k * k;
  Tensor out({n, cout, h, wd});
  // The column buffers double as the backward cache.
  auto cols = std::make_shared<std::vector<double>>(n * patch * plane);
  for (std::size_t s = 0; s < n; ++s) {
    double* col = cols->data() + s * patch * plane;
    if (k == 1) {
      std::copy_n(xv.raw() + s * cin * plane, cin * plane, col);
    } else {
      im2col(xv.raw() + s * cin * plane, cin, h, wd, k, col);
    }
    double* o = out.raw() + s * cout * plane;
    for (std::size_t co = 0; co < cout; ++co) std::fill_n(o + co * plane, plane, bv[co]);
    kernels::gemm_nn(wv.raw(), col, o, cout, patch, plane);
  }

  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, w, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulator(ib);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t co = 0; co < cout; ++co) {
          const double* src = g.raw() + (s * cout + co) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += src[i];
          gb[co] += acc;
        }
      }
    }
    const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
    std::vector<double> dcol(need_x ? patch * plane : 0);
    for (std::size_t s = 0; s < n; ++s) {
      const double* gs = g.raw() + s * cout * plane;
      const double* col = cols->data() + s * patch * plane;
      if (need_w) kernels::gemm_nt(gs, col, t.accumulator(iw).raw(), cout, plane, patch);
      if (need_x) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        kernels::gemm_tn(t.value(iw).raw(), gs, dcol.data(), cout, patch, plane);
        double* gx = t.accumulator(ix).raw() + s * cin * plane;
        if (k == 1) {
          for (std::size_t i = 0; i < cin * plane; ++i) gx[i] += dcol[i];
        } else {
          col2im(dcol.data(), cin, h, wd, k, gx);
        }
      }
    }
  });
}

Var avg_pool2x2(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(2) < 2 || xv.dim(3) < 2) {
    throw std::invalid_argument("avg_pool2x2 expects [N×C×H×W] with H, W >= 2, got " +
                                shape_to_string(xv.shape()));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.raw() + p * h * w;
    double* dst = out.raw() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t c = 0; c < ow; ++c) {
        dst[y * ow + c] = 0.25 * (src[2 * y * w + 2 * c] + src[2 * y * w + 2 * c + 1] +
                                  src[(2 * y + 1) * w + 2 * c] + src[(2 * y + 1) * w + 2 * c + 1]);
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.accumulator(ix);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = g.raw() + p * oh * ow;
      double* dst = gx.raw() + p * h * w;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t c = 0; c < ow; ++c) {
          const double v = 0.25 * src[y * ow + c];
          dst[2 * y * w + 2 * c] += v;
          dst[2 * y * w + 2 * c + 1] += v;
          dst[(2 * y + 1) * w + 2 * c] += v;
          dst[(2 * y + 1) * w + 2 * c + 1] += v;
        }
      }
    }
  });
}

Var conv1d(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 3 || bv.rank() != 1 || wv.dim(1) != xv.dim(1) ||
      wv.dim(0) % 2 == 0 || bv.dim(0) != wv.dim(2)) {
    shape_error("conv1d", xv.shape(), wv.shape());
  }
  const std::size_t steps = xv.dim(0), cin = xv.dim(1), k = wv.dim(0), cout = wv.dim(2);
  const long pad = static_cast<long>(k / 2);
  const long tl = static_cast<long>(steps);
  Tensor out({steps, cout});
  for (std::size_t s = 0; s < steps; ++s) std::copy_n(bv.raw(), cout, out.raw() + s * cout);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const long shift = static_cast<long>(kk) - pad;
    const long t0 = std::max(0L, -shift), t1 = std::min(tl, tl - shift);
    if (t0 >= t1) continue;
    kernels::gemm_nn(xv.raw() + (t0 + shift) * cin, wv.raw() + kk * cin * cout,
                     out.raw() + t0 * cout, static_cast<std::size_t>(t1 - t0), cin, cout);
  }
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, w, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulator(ib);
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t c = 0; c < cout; ++c) gb[c] += g[s * cout + c];
      }
    }
    const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const long shift = static_cast<long>(kk) - pad;
      const long t0 = std::max(0L, -shift), t1 = std::min(tl, tl - shift);
      if (t0 >= t1) continue;
      const auto rows = static_cast<std::size_t>(t1 - t0);
      if (need_x) {
        kernels::gemm_nt(g.raw() + t0 * cout, t.value(iw).raw() + kk * cin * cout,
                         t.accumulator(ix).raw() + (t0 + shift) * cin, rows, cout, cin);
      }
      if (need_w) {
        kernels::gemm_tn(t.value(ix).raw() + (t0 + shift) * cin, g.raw() + t0 * cout,
                         t.accumulator(iw).raw() + kk * cin * cout, rows, cin, cout);
      }
    }
  });
}

}  // namespace lipdistill::ad
