#include "marble/ssm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "marble/error.hpp"

namespace marble {

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Tensor t(Shape{rows, cols});
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

void require_shape(const Tensor& t, const Shape& want, std::string_view what) {
  if (t.shape() != want) {
    throw DimensionError("selective_scan: " + std::string(what) + " has shape " +
                         shape_str(t.shape()) + ", expected " + shape_str(want));
  }
}

}  // namespace

SsmDims dims_of(const SsmBlockParams& p) {
  return SsmDims{p.w_in.rows(), p.w_in.cols(), p.w_b.cols()};
}

SsmBlockParams init_ssm_block(std::size_t d_model, std::size_t inner, std::size_t state, Rng& rng) {
  if (d_model == 0 || inner == 0 || state == 0) {
    throw ArgumentError("init_ssm_block: dimensions must be positive");
  }
  SsmBlockParams p;
  p.w_in = uniform_matrix(d_model, inner, rng);
  p.w_gate = uniform_matrix(d_model, inner, rng);
  p.w_delta = uniform_matrix(inner, inner, rng);
  p.b_delta = Tensor(Shape{inner});
  for (auto& b : p.b_delta.data()) {
    const double dt = std::exp(rng.uniform(std::log(0.01), std::log(0.1)));
    b = dt + std::log(-std::expm1(-dt));  // inverse softplus
  }
  p.w_b = uniform_matrix(inner, state, rng);
  p.w_c = uniform_matrix(inner, state, rng);
  p.a_log = Tensor(Shape{inner});
  for (std::size_t e = 0; e < inner; ++e) {
    const double frac = inner > 1 ? static_cast<double>(e) / static_cast<double>(inner - 1) : 0.0;
    p.a_log[e] = frac * std::log(static_cast<double>(state));
  }
  p.d_skip = Tensor(Shape{inner}, 1.0);
  p.w_out = uniform_matrix(inner, d_model, rng);
  return p;
}

SsmBlockVars bind(Tape& tape, const SsmBlockParams& p, SsmBlockParams* grads) {
  std::vector<const Tensor*> values;
  p.visit([&](std::string_view, const Tensor& t) { values.push_back(&t); });
  std::vector<Tensor*> sinks(values.size(), nullptr);
  if (grads) {
    std::size_t i = 0;
    grads->visit([&](std::string_view, Tensor& t) { sinks[i++] = &t; });
  }
  SsmBlockVars out;
  std::size_t i = 0;
  out.visit([&](std::string_view, Var& v) {
    v = tape.param(*values[i], sinks[i]);
    ++i;
  });
  return out;
}

Var selective_scan(Var u, Var delta, Var B, Var C, Var a, Var d) {
  const Tensor& uv = u.value();
  if (uv.rank() != 2) throw DimensionError("selective_scan: u must be T x E, got " + shape_str(uv.shape()));
  const std::size_t T = uv.rows(), E = uv.cols();
  const Tensor& Bv = B.value();
  if (Bv.rank() != 2) throw DimensionError("selective_scan: B must be T x N, got " + shape_str(Bv.shape()));
  const std::size_t N = Bv.cols();
  const Tensor& dv = delta.value();
  const Tensor& Cv = C.value();
  const Tensor& av = a.value();
  const Tensor& skip = d.value();
  require_shape(dv, {T, E}, "delta");
  require_shape(Bv, {T, N}, "B");
  require_shape(Cv, {T, N}, "C");
  require_shape(av, {E}, "a");
  require_shape(skip, {E}, "d");
  for (std::size_t i = 0; i < dv.size(); ++i) {
    if (!(dv[i] > 0.0)) {
      throw DomainError("selective_scan: delta must be positive, got " + std::to_string(dv[i]) +
                        " at flat index " + std::to_string(i));
    }
  }

  Tape& tape = *u.tape;
  const bool keep = tape.recording();
  std::shared_ptr<std::vector<double>> states;
  if (keep) states = std::make_shared<std::vector<double>>(T * E * N);
  std::vector<double> h(E * N, 0.0);
  Tensor y(Shape{T, E});
  for (std::size_t t = 0; t < T; ++t) {
    const double* bt = Bv.data().data() + t * N;
    const double* ct = Cv.data().data() + t * N;
    for (std::size_t e = 0; e < E; ++e) {
      const double dt = dv[t * E + e];
      const double ut = uv[t * E + e];
      const double decay = std::exp(dt * av[e]);
      const double drive = dt * ut;
      double* he = h.data() + e * N;
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        he[n] = decay * he[n] + drive * bt[n];
        acc += ct[n] * he[n];
      }
      y[t * E + e] = acc + skip[e] * ut;
    }
    if (keep) std::copy(h.begin(), h.end(), states->begin() + static_cast<std::ptrdiff_t>(t * E * N));
  }

  const std::size_t iu = u.id, idl = delta.id, ib = B.id, ic = C.id, ia = a.id, id = d.id;
  return tape.push(
      "selective_scan", std::move(y), {iu, idl, ib, ic, ia, id},
      [=](Tape& tp, std::size_t self) {
        const Tensor& G = tp.grad_ref(self);
        const Tensor& U = tp.value(iu);
        const Tensor& DL = tp.value(idl);
        const Tensor& Bm = tp.value(ib);
        const Tensor& Cm = tp.value(ic);
        const Tensor& A = tp.value(ia);
        const Tensor& Dk = tp.value(id);
        std::vector<double> gu(T * E, 0.0), gdl(T * E, 0.0), gb(T * N, 0.0), gc(T * N, 0.0),
            ga(E, 0.0), gd(E, 0.0);
        // gh holds dL/dh[t] while processing step t; afterwards it is scaled by
        // the step's decay to become the carry into h[t-1].
        std::vector<double> gh(E * N, 0.0);
        const std::vector<double>& hs = *states;
        for (std::size_t t = T; t-- > 0;) {
          const double* h_t = hs.data() + t * E * N;
          const double* h_prev = t > 0 ? hs.data() + (t - 1) * E * N : nullptr;
          const double* bt = Bm.data().data() + t * N;
          const double* ct = Cm.data().data() + t * N;
          for (std::size_t e = 0; e < E; ++e) {
            const double gy = G[t * E + e];
            const double ut = U[t * E + e];
            const double dt = DL[t * E + e];
            const double decay = std::exp(dt * A[e]);
            gd[e] += gy * ut;
            gu[t * E + e] += gy * Dk[e];
            double* ghe = gh.data() + e * N;
            const double* hte = h_t + e * N;
            double g_decay = 0.0, g_drive = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              ghe[n] += gy * ct[n];
              gc[t * N + n] += gy * hte[n];
              if (h_prev) g_decay += ghe[n] * h_prev[e * N + n];
              g_drive += ghe[n] * bt[n];
              gb[t * N + n] += ghe[n] * dt * ut;
              ghe[n] *= decay;
            }
            gdl[t * E + e] += g_drive * ut + g_decay * decay * A[e];
            gu[t * E + e] += g_drive * dt;
            ga[e] += g_decay * decay * dt;
          }
        }
        auto flush = [&tp](std::size_t node, const std::vector<double>& g) {
          if (!tp.needs_grad(node)) return;
          Tensor& dst = tp.grad_ref(node);
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        };
        flush(iu, gu);
        flush(idl, gdl);
        flush(ib, gb);
        flush(ic, gc);
        flush(ia, ga);
        flush(id, gd);
      });
}

Var ssm_block_forward(Var x, const SsmBlockVars& p) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.rows() == 0) {
    throw DimensionError("ssm_block_forward: expected T x D input, got " + shape_str(xv.shape()));
  }
  Var u = matmul(x, p.w_in);
  Var z = matmul(x, p.w_gate);
  Var delta = softplus(add_bias(matmul(u, p.w_delta), p.b_delta));
  Var B = matmul(u, p.w_b);
  Var C = matmul(u, p.w_c);
  Var a = scale(exp(p.a_log), -1.0);
  Var s = selective_scan(u, delta, B, C, a, p.d_skip);
  Var o = matmul(mul(s, silu(z)), p.w_out);
  return add(x, o);
}

AttentionRefParams init_attention_ref(std::size_t d_model, Rng& rng) {
  AttentionRefParams p;
  p.w_q = uniform_matrix(d_model, d_model, rng);
  p.w_k = uniform_matrix(d_model, d_model, rng);
  p.w_v = uniform_matrix(d_model, d_model, rng);
  p.w_o = uniform_matrix(d_model, d_model, rng);
  return p;
}

AttentionRef<Var> bind(Tape& tape, const AttentionRefParams& p) {
  return AttentionRef<Var>{tape.param(p.w_q, nullptr), tape.param(p.w_k, nullptr),
                           tape.param(p.w_v, nullptr), tape.param(p.w_o, nullptr)};
}

Var attention_core(Var q, Var k, Var v) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (Q.rank() != 2 || K.shape() != Q.shape() || V.rank() != 2 || V.rows() != Q.rows()) {
    throw DimensionError("attention_core: incompatible " + shape_str(Q.shape()) + ", " +
                         shape_str(K.shape()) + ", " + shape_str(V.shape()));
  }
  const std::size_t T = Q.rows(), D = Q.cols(), Dv = V.cols();
  const double s = 1.0 / std::sqrt(static_cast<double>(D));
  Tape& tape = *q.tape;
  const bool keep = tape.recording();
  std::shared_ptr<std::vector<double>> weights;
  if (keep) weights = std::make_shared<std::vector<double>>(T * T);
  Tensor out(Shape{T, Dv});
  std::vector<double> p(T);
  for (std::size_t i = 0; i < T; ++i) {
    const double* qi = Q.data().data() + i * D;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < T; ++j) {
      const double* kj = K.data().data() + j * D;
      double acc = 0.0;
      for (std::size_t c = 0; c < D; ++c) acc += qi[c] * kj[c];
      p[j] = acc * s;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < T; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    double* oi = out.data().data() + i * Dv;
    for (std::size_t j = 0; j < T; ++j) {
      p[j] /= z;
      const double* vj = V.data().data() + j * Dv;
      for (std::size_t c = 0; c < Dv; ++c) oi[c] += p[j] * vj[c];
    }
    if (keep) std::copy(p.begin(), p.end(), weights->begin() + static_cast<std::ptrdiff_t>(i * T));
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return tape.push("attention_core", std::move(out), {iq, ik, iv}, [=](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad_ref(self);
    const Tensor& Qv = tp.value(iq);
    const Tensor& Kv = tp.value(ik);
    const Tensor& Vv = tp.value(iv);
    const std::vector<double>& P = *weights;
    std::vector<double> gq(T * D, 0.0), gk(T * D, 0.0), gv(T * Dv, 0.0), gp(T);
    for (std::size_t i = 0; i < T; ++i) {
      const double* gi = G.data().data() + i * Dv;
      double dotp = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        const double* vj = Vv.data().data() + j * Dv;
        double acc = 0.0;
        for (std::size_t c = 0; c < Dv; ++c) {
          acc += gi[c] * vj[c];
          gv[j * Dv + c] += P[i * T + j] * gi[c];
        }
        gp[j] = acc;
        dotp += P[i * T + j] * acc;
      }
      for (std::size_t j = 0; j < T; ++j) {
        const double gs = P[i * T + j] * (gp[j] - dotp) * s;
        for (std::size_t c = 0; c < D; ++c) {
          gq[i * D + c] += gs * Kv[j * D + c];
          gk[j * D + c] += gs * Qv[i * D + c];
        }
      }
    }
    auto flush = [&tp](std::size_t node, const std::vector<double>& g) {
      if (!tp.needs_grad(node)) return;
      Tensor& dst = tp.grad_ref(node);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    };
    flush(iq, gq);
    flush(ik, gk);
    flush(iv, gv);
  });
}

Var attention_ref_forward(Var x, const AttentionRef<Var>& p) {
  Var q = matmul(x, p.w_q);
  Var k = matmul(x, p.w_k);
  Var v = matmul(x, p.w_v);
  return add(x, matmul(attention_core(q, k, v), p.w_o));
}

std::string_view encoder_name(EncoderKind kind) {
  return kind == EncoderKind::Scan ? "scan" : "attention";
}

std::vector<BenchRow> scaling_bench(EncoderKind kind, std::size_t d_model, std::size_t state,
                                    const std::vector<std::size_t>& sizes, std::size_t repetitions,
                                    std::uint64_t seed) {
  if (repetitions < 3) throw ArgumentError("scaling_bench: repetitions must be >= 3");
  if (sizes.empty()) throw ArgumentError("scaling_bench: no sizes given");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0 || (i > 0 && sizes[i] <= sizes[i - 1])) {
      throw ArgumentError("scaling_bench: sizes must be positive and strictly increasing");
    }
  }
  Rng rng(seed);
  const SsmBlockParams block = init_ssm_block(d_model, 2 * d_model, state, rng);
  const AttentionRefParams attn = init_attention_ref(d_model, rng);

  std::vector<BenchRow> rows;
  for (std::size_t T : sizes) {
    Tensor x(Shape{T, d_model});
    for (auto& v : x.data()) v = rng.normal();
    std::vector<double> times;
    for (std::size_t r = 0; r < repetitions; ++r) {
      const auto start = std::chrono::steady_clock::now();
      {
        Tape tape(false);
        Var xv = tape.constant(x);
        if (kind == EncoderKind::Scan) {
          ssm_block_forward(xv, bind(tape, block, nullptr));
        } else {
          attention_ref_forward(xv, bind(tape, attn));
        }
      }
      const auto stop = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    const double median = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    BenchRow row{T, median, std::nullopt};
    if (!rows.empty()) row.ratio_vs_prev = median / rows.back().median_ms;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(EncoderKind kind, const std::vector<BenchRow>& rows, bool header) {
  std::ostringstream os;
  if (header) os << "encoder,T,median_ms,ratio_vs_prev\n";
  for (const auto& r : rows) {
    os << encoder_name(kind) << ',' << r.tokens << ',' << r.median_ms << ',';
    if (r.ratio_vs_prev) os << *r.ratio_vs_prev;
    os << '\n';
  }
  return os.str();
}

}  // namespace marble
