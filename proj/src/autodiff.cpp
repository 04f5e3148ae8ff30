#include "marble/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "marble/error.hpp"

namespace marble {

const Tensor& Var::value() const { return tape->value(id); }

void require_finite(const Tensor& t, std::string_view op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i) + " of " + shape_str(t.shape()));
    }
  }
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(const Tensor& value, Tensor* grad_sink) {
  require_finite(value, "param");
  Node n;
  n.external = &value;
  n.grad_sink = grad_sink;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return value(v.id); }

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape(), 0.0);
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) {
    throw ContractError("grad: node " + std::to_string(v.id) + " received no gradient");
  }
  return n.grad;
}

Var Tape::push(std::string_view op, Tensor value, std::vector<std::size_t> inputs,
               BackwardFn fn) {
  require_finite(value, op);
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw ContractError(std::string(op) + ": input not on tape");
      n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    }
    if (n.needs_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(fn);
    }
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss is not on this tape");
  if (!record_) throw ContractError("backward: tape was built without recording");
  if (done_) throw ContractError("backward: tape already swept");
  if (value(loss.id).size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(value(loss.id).shape()));
  }
  done_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  grad_ref(loss.id).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.grad_sink) {
      Tensor& sink = *n.grad_sink;
      if (sink.shape() != n.grad.shape()) sink = Tensor(n.grad.shape(), 0.0);
      for (std::size_t j = 0; j < sink.size(); ++j) sink[j] += n.grad[j];
    }
  }
}

double softplus(double x) {
  // log(1 + e^x) without overflow for large x.
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, std::string_view op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

template <class Fwd, class Deriv>
Var unary(Var a, std::string_view op, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  const std::size_t ia = a.id;
  return a.tape->push(op, std::move(out), {ia}, [ia, deriv](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(self);
    const Tensor& g = t.grad_ref(self);
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " * " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    if (t.needs_grad(ia)) {
      gemm_nt(g.data().data(), t.value(ib).data().data(), t.grad_ref(ia).data().data(), m, n, k);
    }
    if (t.needs_grad(ib)) {
      gemm_tn(t.value(ia).data().data(), g.data().data(), t.grad_ref(ib).data().data(), m, k, n);
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      Tensor& gi = t.grad_ref(id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    if (t.needs_grad(ia)) {
      const Tensor& bv = t.value(ib);
      Tensor& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      const Tensor& av = t.value(ia);
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; },
               [c](double, double) { return c; });
}

Var add_bias(Var m, Var bias) {
  const Tensor& mv = m.value();
  const Tensor& bv = bias.value();
  require_matrix(mv, "add_bias");
  if (bv.rank() != 1 || bv.size() != mv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " +
                         shape_str(mv.shape()));
  }
  Tensor out = mv;
  const std::size_t rows = mv.rows(), cols = mv.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  }
  const std::size_t im = m.id, ib = bias.id;
  return m.tape->push("add_bias", std::move(out), {im, ib},
                      [im, ib, rows, cols](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad_ref(self);
                        if (t.needs_grad(im)) {
                          Tensor& gm = t.grad_ref(im);
                          for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g[i];
                        }
                        if (t.needs_grad(ib)) {
                          Tensor& gb = t.grad_ref(ib);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
                          }
                        }
                      });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(Var a) {
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(x[i]) + " at flat index " +
                        std::to_string(i));
    }
  }
  return unary(a, "log", [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Var softplus(Var a) {
  return unary(a, "softplus", [](double x) { return softplus(x); },
               [](double x, double) { return sigmoid(x); });
}

Var silu(Var a) {
  return unary(a, "silu", [](double x) { return x * sigmoid(x); },
               [](double x, double) {
                 const double s = sigmoid(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var concat_last_dim(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank() || av.rank() == 0 || av.rank() > 2 || av.rows() != bv.rows()) {
    throw DimensionError("concat_last_dim: incompatible " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const bool vec = av.rank() == 1;
  const std::size_t rows = vec ? 1 : av.rows();
  const std::size_t ca = vec ? av.size() : av.cols();
  const std::size_t cb = vec ? bv.size() : bv.cols();
  Tensor out(vec ? Shape{ca + cb} : Shape{rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data().data() + r * (ca + cb);
    std::copy_n(av.data().data() + r * ca, ca, o);
    std::copy_n(bv.data().data() + r * cb, cb, o + ca);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("concat_last_dim", std::move(out), {ia, ib},
                      [ia, ib, rows, ca, cb](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad_ref(self);
                        if (t.needs_grad(ia)) {
                          Tensor& ga = t.grad_ref(ia);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
                          }
                        }
                        if (t.needs_grad(ib)) {
                          Tensor& gb = t.grad_ref(ib);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cb; ++c) {
                              gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                            }
                          }
                        }
                      });
}

Var gather_rows(Var t, std::span<const std::size_t> idx) {
  const Tensor& tv = t.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows: expected a matrix, got " + shape_str(tv.shape()));
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = tv.rows(), cols = tv.cols();
  Tensor out(Shape{idx.size(), cols});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx[j]) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data().data() + idx[j] * cols, cols, out.data().data() + j * cols);
  }
  const std::size_t it = t.id;
  std::vector<std::size_t> index(idx.begin(), idx.end());
  return t.tape->push("gather_rows", std::move(out), {it},
                      [it, index = std::move(index), cols](Tape& tp, std::size_t self) {
                        if (!tp.needs_grad(it)) return;
                        const Tensor& g = tp.grad_ref(self);
                        Tensor& gt = tp.grad_ref(it);
                        // scatter-add: repeated indices accumulate
                        for (std::size_t j = 0; j < index.size(); ++j) {
                          for (std::size_t c = 0; c < cols; ++c) gt[index[j] * cols + c] += g[j * cols + c];
                        }
                      });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->push("reshape", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Tensor& g = t.grad_ref(self);
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return a.tape->push("sum", Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const double g = t.grad_ref(self)[0];
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var dot(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("dot", Tensor::scalar(s), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const double g = t.grad_ref(self)[0];
    if (t.needs_grad(ia)) {
      const Tensor& bv = t.value(ib);
      Tensor& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bv[i];
    }
    if (t.needs_grad(ib)) {
      const Tensor& av = t.value(ia);
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * av[i];
    }
  });
}

Var softmax_1d(Var v) {
  const Tensor& x = v.value();
  if (x.rank() != 1 || x.size() == 0) {
    throw DimensionError("softmax_1d: expected a non-empty vector, got " + shape_str(x.shape()));
  }
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  Tensor out(x.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) out[i] /= z;
  const std::size_t iv = v.id;
  return v.tape->push("softmax_1d", std::move(out), {iv}, [iv](Tape& t, std::size_t self) {
    if (!t.needs_grad(iv)) return;
    const Tensor& p = t.value(self);
    const Tensor& g = t.grad_ref(self);
    double gp = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) gp += g[i] * p[i];
    Tensor& gv = t.grad_ref(iv);
    for (std::size_t i = 0; i < p.size(); ++i) gv[i] += p[i] * (g[i] - gp);
  });
}

Var log_sum_exp(Var v) {
  const Tensor& x = v.value();
  if (x.size() == 0) throw DimensionError("log_sum_exp: empty input");
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  double z = 0.0;
  for (double e : x.data()) z += std::exp(e - mx);
  const double lse = mx + std::log(z);
  const std::size_t iv = v.id;
  return v.tape->push("log_sum_exp", Tensor::scalar(lse), {iv}, [iv](Tape& t, std::size_t self) {
    if (!t.needs_grad(iv)) return;
    const double g = t.grad_ref(self)[0];
    const double l = t.value(self)[0];
    const Tensor& xv = t.value(iv);
    Tensor& gv = t.grad_ref(iv);
    for (std::size_t i = 0; i < xv.size(); ++i) gv[i] += g * std::exp(xv[i] - l);
  });
}

Var pick(Var v, std::size_t i) {
  const Tensor& x = v.value();
  if (i >= x.size()) {
    throw IndexError("pick: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  }
  const std::size_t iv = v.id;
  return v.tape->push("pick", Tensor::scalar(x[i]), {iv}, [iv, i](Tape& t, std::size_t self) {
    if (!t.needs_grad(iv)) return;
    t.grad_ref(iv)[i] += t.grad_ref(self)[0];
  });
}

Var stack_scalars(std::span<const Var> scalars) {
  if (scalars.empty()) throw DimensionError("stack_scalars: empty input");
  Tape* tape = scalars.front().tape;
  std::vector<double> vals;
  std::vector<std::size_t> ids;
  for (const Var& s : scalars) {
    if (s.tape != tape) throw ContractError("stack_scalars: inputs on different tapes");
    vals.push_back(s.value().item());
    ids.push_back(s.id);
  }
  std::vector<std::size_t> inputs = ids;
  return tape->push("stack_scalars", Tensor::vector(std::move(vals)), std::move(inputs),
                    [ids](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_ref(self);
                      for (std::size_t j = 0; j < ids.size(); ++j) {
                        if (t.needs_grad(ids[j])) t.grad_ref(ids[j])[0] += g[j];
                      }
                    });
}

}  // namespace marble
