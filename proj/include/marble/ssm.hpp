#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "marble/autodiff.hpp"
#include "marble/rng.hpp"
#include "marble/tensor.hpp"

namespace marble {

// Diagonal selective state-space block. Projection matrices are stored
// input-major ([in x out]) so a sequence X[T x in] maps as X * W.
//
//   u = X W_in, z = X W_gate
//   delta = softplus(u W_delta + b_delta), B = u W_B, C = u W_C
//   s = scan(u, delta, B, C, -exp(a_log), d_skip)
//   out = X + (s * silu(z)) W_out
template <class T>
struct SsmBlock {
  T w_in;     // D x E
  T w_gate;   // D x E
  T w_delta;  // E x E
  T b_delta;  // E
  T w_b;      // E x N
  T w_c;      // E x N
  T a_log;    // E
  T d_skip;   // E
  T w_out;    // E x D

  template <class F>
  void visit(F&& f) {
    f("w_in", w_in);
    f("w_gate", w_gate);
    f("w_delta", w_delta);
    f("b_delta", b_delta);
    f("w_b", w_b);
    f("w_c", w_c);
    f("a_log", a_log);
    f("d_skip", d_skip);
    f("w_out", w_out);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<SsmBlock*>(this)->visit([&](std::string_view n, const T& v) { f(n, v); });
  }
};

using SsmBlockParams = SsmBlock<Tensor>;
using SsmBlockVars = SsmBlock<Var>;

struct SsmDims {
  std::size_t d_model = 0;
  std::size_t inner = 0;
  std::size_t state = 0;
};

SsmDims dims_of(const SsmBlockParams& p);

// Uniform(+-1/sqrt(fan_in)) projections, softplus(b_delta) log-uniform in
// [0.01, 0.1], -A log-spaced over [1, N] across channels, d_skip = 1.
SsmBlockParams init_ssm_block(std::size_t d_model, std::size_t inner, std::size_t state, Rng& rng);

// Binds every field as a tape parameter; gradients go to `grads` when given.
SsmBlockVars bind(Tape& tape, const SsmBlockParams& p, SsmBlockParams* grads);

// Linear-time selective scan with h_0 = 0:
//   h[t,e,:] = exp(delta[t,e] a[e]) h[t-1,e,:] + delta[t,e] B[t,:] u[t,e]
//   y[t,e]   = <C[t,:], h[t,e,:]> + d[e] u[t,e]
// Shapes: u, delta [T x E]; B, C [T x N]; a, d [E]. Requires delta > 0.
// When recording, every h[t] is kept for the backward sweep.
Var selective_scan(Var u, Var delta, Var B, Var C, Var a, Var d);

Var ssm_block_forward(Var x, const SsmBlockVars& p);

template <class T>
struct AttentionRef {
  T w_q, w_k, w_v, w_o;  // D x D

  template <class F>
  void visit(F&& f) {
    f("w_q", w_q);
    f("w_k", w_k);
    f("w_v", w_v);
    f("w_o", w_o);
  }
};

using AttentionRefParams = AttentionRef<Tensor>;

AttentionRefParams init_attention_ref(std::size_t d_model, Rng& rng);

// softmax(Q K^T / sqrt(D)) V computed row by row; the T x T weight matrix is
// only materialized when the tape records.
Var attention_core(Var q, Var k, Var v);

// x + attention_core(x W_q, x W_k, x W_v) W_o
Var attention_ref_forward(Var x, const AttentionRef<Var>& p);
AttentionRef<Var> bind(Tape& tape, const AttentionRefParams& p);

enum class EncoderKind { Scan, Attention };

struct BenchRow {
  std::size_t tokens = 0;
  double median_ms = 0.0;
  std::optional<double> ratio_vs_prev;  // time(T_i) / time(T_{i-1})
};

// Times one inference-mode encoder pass per repetition for each T and
// reports the median. `sizes` must be strictly increasing; repetitions >= 3.
std::vector<BenchRow> scaling_bench(EncoderKind kind, std::size_t d_model, std::size_t state,
                                    const std::vector<std::size_t>& sizes, std::size_t repetitions,
                                    std::uint64_t seed = 0);

std::string bench_csv(EncoderKind kind, const std::vector<BenchRow>& rows, bool header = true);
std::string_view encoder_name(EncoderKind kind);

}  // namespace marble
