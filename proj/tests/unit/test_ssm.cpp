#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "marble/error.hpp"
#include "marble/gradcheck.hpp"
#include "marble/ssm.hpp"

using namespace marble;
using marble::testing::random_tensor;

namespace {

struct ScanInputs {
  Tensor u, delta, B, C, a, d;
};

ScanInputs random_scan(Rng& rng, std::size_t T, std::size_t E, std::size_t N) {
  return {random_tensor({T, E}, rng), random_tensor({T, E}, rng, 0.01, 1.5), random_tensor({T, N}, rng),
          random_tensor({T, N}, rng), random_tensor({E}, rng, -3.0, -0.1), random_tensor({E}, rng)};
}

// Materializes every (t, s) contribution separately:
//   y[t,e] = sum_{s<=t} C[t] . (prod_{r=s+1..t} exp(delta[r,e] a[e])) delta[s,e] B[s] u[s,e] + d[e] u[t,e]
Tensor naive_scan(const ScanInputs& in) {
  const std::size_t T = in.u.rows(), E = in.u.cols(), N = in.B.cols();
  Tensor y({T, E});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t e = 0; e < E; ++e) {
      double acc = in.d[e] * in.u.at(t, e);
      for (std::size_t s = 0; s <= t; ++s) {
        double decay = 1.0;
        for (std::size_t r = s + 1; r <= t; ++r) decay *= std::exp(in.delta.at(r, e) * in.a[e]);
        for (std::size_t n = 0; n < N; ++n) {
          acc += in.C.at(t, n) * decay * in.delta.at(s, e) * in.B.at(s, n) * in.u.at(s, e);
        }
      }
      y.at(t, e) = acc;
    }
  }
  return y;
}

Tensor run_scan(const ScanInputs& in) {
  Tape tape(false);
  return selective_scan(tape.constant(in.u), tape.constant(in.delta), tape.constant(in.B),
                        tape.constant(in.C), tape.constant(in.a), tape.constant(in.d))
      .value();
}

std::vector<Tensor*> block_tensors(SsmBlockParams& p) {
  std::vector<Tensor*> out;
  p.visit([&](std::string_view, Tensor& t) { out.push_back(&t); });
  return out;
}

SsmBlockVars block_from(std::span<const Var> v) {
  return SsmBlockVars{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
}

}  // namespace

TEST_CASE("selective scan matches the naive quadratic oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_scan(rng, 1 + rng.below(32), 1 + rng.below(4), 1 + rng.below(4));
    CHECK(max_abs_diff(run_scan(in), naive_scan(in)) < 1e-12);
  }
  const auto small = random_scan(rng, 4, 2, 2);
  CHECK(max_abs_diff(run_scan(small), naive_scan(small)) < 1e-12);
}

TEST_CASE("single step scan is the closed form") {
  Rng rng(12);
  const auto in = random_scan(rng, 1, 3, 4);
  const Tensor y = run_scan(in);
  double cb = 0.0;
  for (std::size_t n = 0; n < 4; ++n) cb += in.C[n] * in.B[n];
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(y[e] == doctest::Approx(cb * in.delta[e] * in.u[e] + in.d[e] * in.u[e]).epsilon(1e-14));
  }
}

TEST_CASE("vanishing step size leaves only the skip path") {
  Rng rng(13);
  auto in = random_scan(rng, 6, 3, 2);
  in.delta.fill(1e-300);
  const Tensor y = run_scan(in);
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t e = 0; e < 3; ++e) CHECK(std::abs(y.at(t, e) - in.d[e] * in.u.at(t, e)) < 1e-250);
  }
}

TEST_CASE("scan rejects bad inputs") {
  Rng rng(14);
  auto in = random_scan(rng, 3, 2, 2);
  in.delta.at(1, 1) = 0.0;
  CHECK_THROWS_AS(run_scan(in), DomainError);
  in.delta.at(1, 1) = -0.5;
  CHECK_THROWS_AS(run_scan(in), DomainError);
  auto wrong = random_scan(rng, 3, 2, 2);
  wrong.B = random_tensor({2, 2}, rng);
  CHECK_THROWS_AS(run_scan(wrong), DimensionError);
}

TEST_CASE("scan gradient through the recurrence") {
  Rng rng(15);
  auto in = random_scan(rng, 7, 3, 2);
  Tensor* ps[] = {&in.u, &in.delta, &in.B, &in.C, &in.a, &in.d};
  Tensor w = random_tensor({7, 3}, rng);
  const auto res = finite_diff_check(
      [&](Tape& tape, std::span<const Var> v) {
        return dot(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]), tape.constant(w));
      },
      ps);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("scan output stays bounded for long bounded inputs") {
  Rng rng(16);
  const std::size_t T = 65536, E = 2, N = 2;
  ScanInputs in{random_tensor({T, E}, rng, -10, 10), random_tensor({T, E}, rng, 0.001, 2.0),
                random_tensor({T, N}, rng, -1, 1),   random_tensor({T, N}, rng, -1, 1),
                Tensor::vector({-1e-3, -2.0}),       Tensor::vector({1.0, 1.0})};
  const Tensor y = run_scan(in);
  CHECK(y.all_finite());
}

TEST_CASE("scan is order sensitive") {
  Rng rng(17);
  auto in = random_scan(rng, 8, 2, 2);
  auto rev = in;
  for (std::size_t t = 0; t < 8; ++t) {
    for (std::size_t e = 0; e < 2; ++e) {
      rev.u.at(t, e) = in.u.at(7 - t, e);
      rev.delta.at(t, e) = in.delta.at(7 - t, e);
    }
    for (std::size_t n = 0; n < 2; ++n) {
      rev.B.at(t, n) = in.B.at(7 - t, n);
      rev.C.at(t, n) = in.C.at(7 - t, n);
    }
  }
  const Tensor y = run_scan(in), yr = run_scan(rev);
  double diff = 0.0;
  for (std::size_t t = 0; t < 8; ++t) diff = std::max(diff, std::abs(y.at(t, 0) - yr.at(7 - t, 0)));
  CHECK(diff > 1e-3);
}

TEST_CASE("block initialization ranges") {
  Rng rng(18);
  const auto p = init_ssm_block(8, 16, 4, rng);
  const auto dims = dims_of(p);
  CHECK(dims.d_model == 8);
  CHECK(dims.inner == 16);
  CHECK(dims.state == 4);
  for (double v : p.w_in.data()) CHECK(std::abs(v) <= 1.0 / std::sqrt(8.0));
  for (double v : p.w_delta.data()) CHECK(std::abs(v) <= 1.0 / std::sqrt(16.0));
  for (double b : p.b_delta.data()) {
    CHECK(softplus(b) >= 0.01 - 1e-12);
    CHECK(softplus(b) <= 0.1 + 1e-12);
  }
  for (double al : p.a_log.data()) {
    CHECK(std::exp(al) >= 1.0 - 1e-12);
    CHECK(std::exp(al) <= 4.0 + 1e-12);
  }
  CHECK(std::exp(p.a_log[0]) == doctest::Approx(1.0));
  CHECK(std::exp(p.a_log[15]) == doctest::Approx(4.0));
}

TEST_CASE("zero output projection makes the block an identity") {
  Rng rng(19);
  auto p = init_ssm_block(6, 12, 3, rng);
  p.w_out.fill(0.0);
  const Tensor x = random_tensor({5, 6}, rng);
  Tape tape(false);
  CHECK(ssm_block_forward(tape.constant(x), bind(tape, p, nullptr)).value() == x);
}

TEST_CASE("single-token block matches the hand-composed map") {
  Rng rng(20);
  const std::size_t D = 3, E = 4, N = 2;
  const auto p = init_ssm_block(D, E, N, rng);
  const Tensor x = random_tensor({1, D}, rng);
  Tape tape(false);
  const Tensor out = ssm_block_forward(tape.constant(x), bind(tape, p, nullptr)).value();

  auto vecmat = [](const std::vector<double>& v, const Tensor& m) {
    std::vector<double> r(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) r[j] += v[i] * m.at(i, j);
    return r;
  };
  const std::vector<double> xv(x.data().begin(), x.data().end());
  const auto u = vecmat(xv, p.w_in);
  const auto z = vecmat(xv, p.w_gate);
  auto pre = vecmat(u, p.w_delta);
  const auto B = vecmat(u, p.w_b);
  const auto C = vecmat(u, p.w_c);
  double cb = 0.0;
  for (std::size_t n = 0; n < N; ++n) cb += C[n] * B[n];
  std::vector<double> g(E);
  for (std::size_t e = 0; e < E; ++e) {
    const double delta = std::log1p(std::exp(pre[e] + p.b_delta[e]));
    const double s = cb * delta * u[e] + p.d_skip[e] * u[e];
    g[e] = s * z[e] / (1.0 + std::exp(-z[e]));
  }
  const auto o = vecmat(g, p.w_out);
  for (std::size_t j = 0; j < D; ++j) CHECK(out[j] == doctest::Approx(xv[j] + o[j]).epsilon(1e-12));
}

TEST_CASE("block gradient check over every field") {
  Rng rng(21);
  auto p = init_ssm_block(8, 16, 4, rng);
  // Larger step sizes than the initialization so the recurrence matters.
  for (auto& b : p.b_delta.data()) b = rng.uniform(-1.0, 0.5);
  Tensor x = random_tensor({12, 8}, rng);
  Tensor w = random_tensor({12, 8}, rng);
  auto params = block_tensors(p);
  params.push_back(&x);
  // Step 1e-4: at 1e-5 the w_delta coordinates (gradients near 1e-6) sit
  // at the round-off floor of the differenced loss.
  const auto res = finite_diff_check(
      [&](Tape& tape, std::span<const Var> v) {
        return dot(ssm_block_forward(v[9], block_from(v)), tape.constant(w));
      },
      params, 1e-4);
  CAPTURE(res.worst_analytic);
  CAPTURE(res.worst_numeric);
  CAPTURE(res.worst_index);
  CHECK(res.max_rel_error < 1e-4);
  for (std::size_t i = 0; i < res.per_param.size(); ++i) {
    CAPTURE(i);
    CHECK(res.per_param[i] < 1e-4);
  }
}

TEST_CASE("attention reference examples") {
  Rng rng(22);
  const std::size_t D = 4;
  const auto p = init_attention_ref(D, rng);
  Tape tape(false);
  const auto vars = bind(tape, p);

  const Tensor x1 = random_tensor({1, D}, rng);
  const Tensor y1 = attention_ref_forward(tape.constant(x1), vars).value();
  std::vector<double> v(D, 0.0), o(D, 0.0);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < D; ++j) v[j] += x1[i] * p.w_v.at(i, j);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < D; ++j) o[j] += v[i] * p.w_o.at(i, j);
  for (std::size_t j = 0; j < D; ++j) CHECK(y1[j] == doctest::Approx(x1[j] + o[j]).epsilon(1e-13));

  Tensor same({3, D});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < D; ++j) same.at(r, j) = 0.25 * static_cast<double>(j) - 0.3;
  const Tensor ys = attention_ref_forward(tape.constant(same), vars).value();
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t j = 0; j < D; ++j) CHECK(ys.at(r, j) == ys.at(0, j));
}

TEST_CASE("attention core matches the dense formula") {
  Rng rng(23);
  const std::size_t T = 4, D = 3;
  const Tensor q = random_tensor({T, D}, rng), k = random_tensor({T, D}, rng), v = random_tensor({T, D}, rng);
  Tape tape(false);
  const Tensor out = attention_core(tape.constant(q), tape.constant(k), tape.constant(v)).value();
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> s(T);
    double z = 0.0;
    for (std::size_t j = 0; j < T; ++j) {
      double dotp = 0.0;
      for (std::size_t c = 0; c < D; ++c) dotp += q.at(i, c) * k.at(j, c);
      s[j] = std::exp(dotp / std::sqrt(static_cast<double>(D)));
      z += s[j];
    }
    for (std::size_t c = 0; c < D; ++c) {
      double want = 0.0;
      for (std::size_t j = 0; j < T; ++j) want += s[j] / z * v.at(j, c);
      CHECK(std::abs(out.at(i, c) - want) < 1e-14);
    }
  }
}

TEST_CASE("attention gradient check") {
  Rng rng(24);
  auto p = init_attention_ref(4, rng);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor w = random_tensor({5, 4}, rng);
  Tensor* ps[] = {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &x};
  const auto res = finite_diff_check(
      [&](Tape& tape, std::span<const Var> v) {
        return dot(attention_ref_forward(v[4], AttentionRef<Var>{v[0], v[1], v[2], v[3]}), tape.constant(w));
      },
      ps);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("scaling bench shape and arguments") {
  const auto one = scaling_bench(EncoderKind::Scan, 8, 4, {64}, 3);
  REQUIRE(one.size() == 1);
  CHECK_FALSE(one[0].ratio_vs_prev.has_value());
  const auto rows = scaling_bench(EncoderKind::Attention, 8, 4, {16, 32}, 3);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].ratio_vs_prev.has_value());
  const std::string csv = bench_csv(EncoderKind::Attention, rows);
  CHECK(csv.rfind("encoder,T,median_ms,ratio_vs_prev\n", 0) == 0);
  CHECK(csv.find("attention,32,") != std::string::npos);
  CHECK_THROWS_AS(scaling_bench(EncoderKind::Scan, 8, 4, {64}, 2), ArgumentError);
  CHECK_THROWS_AS(scaling_bench(EncoderKind::Scan, 8, 4, {64, 32}, 3), ArgumentError);
}
