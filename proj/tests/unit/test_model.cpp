#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "helpers.hpp"
#include "marble/error.hpp"
#include "marble/gradcheck.hpp"
#include "marble/metrics.hpp"
#include "marble/model.hpp"

using namespace marble;
using marble::testing::random_bag;
using marble::testing::random_tensor;

namespace {

ModelDims tiny_dims(HeadKind head, std::size_t levels = 2) {
  ModelDims d;
  d.d_model = 4;
  d.inner = 6;
  d.state = 2;
  d.levels = levels;
  d.classes = head == HeadKind::Classification ? 3 : 1;
  d.head = head;
  return d;
}

// Rebuilds a MarbleVars skeleton from leaves listed in visit order.
MarbleVars vars_from(std::span<const Var> v, const MarbleParams& like) {
  MarbleVars out;
  out.head = like.head;
  out.blocks.resize(like.blocks.size());
  out.fuse.resize(like.fuse.size());
  std::size_t i = 0;
  out.visit([&](const std::string&, Var& var) { var = v[i++]; });
  return out;
}

Linear<Var> linear(Tape& tape, Tensor w, Tensor b) { return {tape.constant(std::move(w)), tape.constant(std::move(b))}; }

// [I | 0] or [0 | I] as a 2D x D input-major projection.
Tensor selector(std::size_t D, bool right) {
  Tensor w({2 * D, D});
  for (std::size_t j = 0; j < D; ++j) w.at(right ? D + j : j, j) = 1.0;
  return w;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("marble_test_" + name)).string();
}

}  // namespace

TEST_CASE("fusion selection examples") {
  Rng rng(1);
  const std::size_t D = 3;
  const Tensor x = random_tensor({4, D}, rng), y = random_tensor({2, D}, rng);
  const std::vector<std::size_t> parents = {1, 0, 1, 1};
  Tape tape(false);
  const Tensor left = fuse_level(tape.constant(x), tape.constant(y), parents,
                                 linear(tape, selector(D, false), Tensor({D})))
                          .value();
  CHECK(left == x);
  const Tensor right = fuse_level(tape.constant(x), tape.constant(y), parents,
                                  linear(tape, selector(D, true), Tensor({D})))
                           .value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < D; ++j) CHECK(right.at(i, j) == y.at(parents[i], j));

  const std::vector<std::size_t> bad = {0, 2, 0, 0};
  CHECK_THROWS_AS(fuse_level(tape.constant(x), tape.constant(y), bad,
                             linear(tape, selector(D, false), Tensor({D}))),
                  IndexError);
}

TEST_CASE("fusion matches per-row arithmetic and accumulates onto shared parents") {
  Rng rng(2);
  const std::size_t D = 2;
  const Tensor x = random_tensor({3, D}, rng), y = random_tensor({2, D}, rng);
  const Tensor w = random_tensor({2 * D, D}, rng), b = random_tensor({D}, rng);
  const std::vector<std::size_t> parents = {0, 0, 1};
  Tape tape;
  Var yv = tape.leaf(y);
  Var out = fuse_level(tape.constant(x), yv, parents, linear(tape, w, b));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < D; ++j) {
      double want = b[j];
      for (std::size_t c = 0; c < D; ++c) want += x.at(i, c) * w.at(c, j) + y.at(parents[i], c) * w.at(D + c, j);
      CHECK(std::abs(out.value().at(i, j) - want) < 1e-14);
    }
  }
  // d sum(out) / d y[p, c] = (children of p) * sum_j w[D + c, j]
  tape.backward(sum(out));
  for (std::size_t p = 0; p < 2; ++p) {
    const double kids = p == 0 ? 2.0 : 1.0;
    for (std::size_t c = 0; c < D; ++c) {
      double row = 0.0;
      for (std::size_t j = 0; j < D; ++j) row += w.at(D + c, j);
      CHECK(tape.grad(yv).at(p, c) == doctest::Approx(kids * row).epsilon(1e-13));
    }
  }
}

TEST_CASE("fusion locality: a parent row only reaches its children") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t D = 3, tp = 1 + rng.below(4), tk = 1 + rng.below(8);
    const Tensor x = random_tensor({tk, D}, rng);
    Tensor y = random_tensor({tp, D}, rng);
    std::vector<std::size_t> parents(tk);
    for (auto& p : parents) p = rng.below(tp);
    Tape tape(false);
    const auto phi = linear(tape, random_tensor({2 * D, D}, rng), random_tensor({D}, rng));
    const Tensor before = fuse_level(tape.constant(x), tape.constant(y), parents, phi).value();
    const std::size_t zeroed = rng.below(tp);
    for (std::size_t c = 0; c < D; ++c) y.at(zeroed, c) = 0.0;
    const Tensor after = fuse_level(tape.constant(x), tape.constant(y), parents, phi).value();
    for (std::size_t i = 0; i < tk; ++i) {
      bool same = true;
      for (std::size_t c = 0; c < D; ++c) same = same && before.at(i, c) == after.at(i, c);
      if (parents[i] != zeroed) CHECK(same);
    }
  }
}

TEST_CASE("attention pooling examples") {
  Rng rng(4);
  Tape tape(false);
  const Tensor one = random_tensor({1, 3}, rng);
  const Pooled p1 = attention_pool(tape.constant(one), tape.constant(random_tensor({3}, rng)));
  CHECK(p1.weights.value() == Tensor::vector({1.0}));
  CHECK(p1.z.value() == Tensor::vector({one[0], one[1], one[2]}));

  const Tensor y = random_tensor({5, 3}, rng);
  const Pooled uni = attention_pool(tape.constant(y), tape.constant(Tensor({3})));
  for (std::size_t j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 5; ++i) mean += y.at(i, j) / 5.0;
    CHECK(uni.z.value()[j] == doctest::Approx(mean).epsilon(1e-14));
  }
  CHECK_THROWS_AS(attention_pool(tape.constant(Tensor({0, 3})), tape.constant(Tensor({3}))), DimensionError);
}

TEST_CASE("pooling is convex and permutation invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.below(9), D = 1 + rng.below(5);
    const Tensor y = random_tensor({T, D}, rng, -5, 5);
    const Tensor w = random_tensor({D}, rng, -3, 3);
    Tape tape(false);
    const Pooled p = attention_pool(tape.constant(y), tape.constant(w));
    double total = 0.0;
    for (double a : p.weights.value().data()) {
      CHECK(a >= 0.0);
      total += a;
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
    for (std::size_t d = 0; d < D; ++d) {
      double lo = y.at(0, d), hi = y.at(0, d);
      for (std::size_t i = 1; i < T; ++i) {
        lo = std::min(lo, y.at(i, d));
        hi = std::max(hi, y.at(i, d));
      }
      CHECK(p.z.value()[d] >= lo - 1e-12);
      CHECK(p.z.value()[d] <= hi + 1e-12);
    }

    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Tensor yp({T, D});
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t d = 0; d < D; ++d) yp.at(i, d) = y.at(perm[i], d);
    const Pooled q = attention_pool(tape.constant(yp), tape.constant(w));
    CHECK(max_abs_diff(q.z.value(), p.z.value()) <= 1e-12);
    for (std::size_t i = 0; i < T; ++i) CHECK(std::abs(q.weights.value()[i] - p.weights.value()[perm[i]]) <= 1e-15);
  }
}

TEST_CASE("classification and risk heads") {
  Rng rng(6);
  Tape tape(false);
  const Tensor z = random_tensor({4}, rng);
  const Tensor zero_logits = classify(tape.constant(z), tape.constant(Tensor({3, 4})), tape.constant(Tensor({3}))).value();
  CHECK(zero_logits == Tensor({3}));
  const Tensor probs = softmax_1d(tape.constant(zero_logits)).value();
  for (double p : probs.data()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor same({2, 4});
  for (std::size_t j = 0; j < 4; ++j) same.at(0, j) = same.at(1, j) = rng.uniform(-1, 1);
  const Tensor eq = classify(tape.constant(z), tape.constant(same), tape.constant(Tensor({2}))).value();
  CHECK(eq[0] == eq[1]);

  const Tensor w = random_tensor({3, 4}, rng), b = random_tensor({3}, rng);
  const Tensor logits = classify(tape.constant(z), tape.constant(w), tape.constant(b)).value();
  for (std::size_t c = 0; c < 3; ++c) {
    double want = b[c];
    for (std::size_t j = 0; j < 4; ++j) want += w.at(c, j) * z[j];
    CHECK(std::abs(logits[c] - want) < 1e-15);
  }
  CHECK_THROWS_AS(classify(tape.constant(z), tape.constant(Tensor({3, 5})), tape.constant(b)), DimensionError);

  CHECK(risk_score(tape.constant(z), tape.constant(Tensor({4}))).value().item() == 0.0);
  CHECK(risk_score(tape.constant(z), tape.constant(Tensor::vector({1, 0, 0, 0}))).value().item() == z[0]);
  const Tensor beta = random_tensor({4}, rng);
  double r = 0.0;
  for (std::size_t j = 0; j < 4; ++j) r += beta[j] * z[j];
  CHECK(risk_score(tape.constant(z), tape.constant(beta)).value().item() == doctest::Approx(r).epsilon(1e-15));
  CHECK_THROWS_AS(risk_score(tape.constant(z), tape.constant(Tensor({3}))), DimensionError);
}

TEST_CASE("encode_slide examples") {
  Rng rng(7);
  {
    auto p = init_marble(tiny_dims(HeadKind::Classification, 1), rng);
    std::vector<LevelGrid> g = {LevelGrid::full(0, 1, 1, 0)};
    const TokenBag bag = build_bag(g, {random_tensor({1, 4}, rng)});
    const SlideOutput out = encode_slide(bag, p);
    CHECK(out.weights == Tensor::vector({1.0}));
    CHECK(out.pooled == Tensor::vector({out.levels[0][0], out.levels[0][1], out.levels[0][2], out.levels[0][3]}));
  }
  {
    // Left-selection fusion and identity blocks reduce the net to pooling.
    auto p = init_marble(tiny_dims(HeadKind::Classification), rng);
    for (auto& b : p.blocks) b.w_out.fill(0.0);
    p.fuse[0].weight = selector(4, false);
    p.fuse[0].bias.fill(0.0);
    const TokenBag bag = random_bag(rng, 2, 2, 2, 2, 4, 0.0);
    const SlideOutput out = encode_slide(bag, p);
    CHECK(out.levels[1] == bag.levels[1].embeddings);
    Tape tape(false);
    const Pooled want = attention_pool(tape.constant(bag.levels[1].embeddings), tape.constant(p.pool_w));
    CHECK(out.pooled == want.z.value());
  }
}

TEST_CASE("encode_slide rejects empty levels and dimension mismatches") {
  Rng rng(8);
  const auto p = init_marble(tiny_dims(HeadKind::Classification), rng);
  std::vector<LevelGrid> g = {LevelGrid::full(0, 1, 1, 0), LevelGrid::full(1, 2, 2, 2)};
  g[1].tissue.assign(4, false);
  const TokenBag hollow = build_bag(g, {random_tensor({1, 4}, rng), Tensor()});
  CHECK_THROWS_AS(encode_slide(hollow, p), DimensionError);
  CHECK_THROWS_AS(encode_slide(random_bag(rng, 2, 2, 2, 2, 5, 0.0), p), DimensionError);
  CHECK_THROWS_AS(encode_slide(random_bag(rng, 3, 1, 1, 2, 4, 0.0), p), DimensionError);
}

TEST_CASE("levels are encoded coarse to fine") {
  Rng rng(9);
  auto dims = tiny_dims(HeadKind::Classification, 3);
  const auto p = init_marble(dims, rng);
  const TokenBag bag = random_bag(rng, 3, 1, 2, 2, 4, 0.0);
  Tape tape(false);
  const SlideVars v = encode_slide(tape, bag, bind(tape, p, nullptr));
  CHECK(v.level_order == std::vector<std::size_t>{0, 1, 2});
  // The coarser outputs are recorded before the finer ones on the tape.
  CHECK(v.levels[0].id < v.levels[1].id);
  CHECK(v.levels[1].id < v.levels[2].id);
}

TEST_CASE("end-to-end gradient check for both heads") {
  for (HeadKind head : {HeadKind::Classification, HeadKind::Survival}) {
    CAPTURE(head_name(head));
    Rng rng(10);
    auto p = init_marble(tiny_dims(head), rng);
    for (auto& b : p.blocks)
      for (auto& v : b.b_delta.data()) v = rng.uniform(-1.0, 0.5);
    for (auto& v : p.pool_w.data()) v = rng.uniform(-1, 1);
    if (head == HeadKind::Survival)
      for (auto& v : p.cox_beta.data()) v = rng.uniform(-1, 1);
    const TokenBag bag = random_bag(rng, 2, 2, 2, 2, 4, 0.0);
    auto named = named_tensors(p);
    std::vector<Tensor*> ps;
    for (auto& [name, t] : named) ps.push_back(t);
    const auto res = finite_diff_check(
        [&](Tape& tape, std::span<const Var> v) {
          const SlideVars out = encode_slide(tape, bag, vars_from(v, p));
          return head == HeadKind::Classification ? cross_entropy(out.head, 1) : mul(out.head, out.head);
        },
        ps, 1e-4);
    CAPTURE(named[res.worst_param].first);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("model initialization layout") {
  Rng rng(11);
  const auto c = init_marble(tiny_dims(HeadKind::Classification, 3), rng);
  CHECK(c.blocks.size() == 3);
  CHECK(c.fuse.size() == 2);
  CHECK(c.cox_beta.size() == 0);
  CHECK(dims_of(c) == tiny_dims(HeadKind::Classification, 3));
  const auto s = init_marble(tiny_dims(HeadKind::Survival), rng);
  CHECK(s.cls_w.size() == 0);
  CHECK(s.cox_beta.size() == 4);
  for (const auto& [name, t] : named_tensors(s)) CHECK(name.find("cls") == std::string::npos);
  CHECK(parse_head("survival") == HeadKind::Survival);
  CHECK_THROWS_AS(parse_head("regression"), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(12);
  for (HeadKind head : {HeadKind::Classification, HeadKind::Survival}) {
    const auto p = init_marble(tiny_dims(head, 3), rng);
    const std::string path = temp_path("ckpt.bin");
    save_checkpoint(p, path, 42);
    const auto q = load_checkpoint(path);
    CHECK(checkpoint_bytes(q) == checkpoint_bytes(p));
    CHECK(dims_of(q) == dims_of(p));
    const TokenBag bag = random_bag(rng, 3, 2, 2, 2, 4, 0.0);
    CHECK(encode_slide(bag, q).head == encode_slide(bag, p).head);
    std::ifstream man(path + ".manifest");
    std::string text((std::istreambuf_iterator<char>(man)), std::istreambuf_iterator<char>());
    CHECK(text.find("D=4\n") != std::string::npos);
    CHECK(text.find("S=2\n") != std::string::npos);
    CHECK(text.find("seed=42\n") != std::string::npos);
  }
}

TEST_CASE("corrupted checkpoints are rejected") {
  Rng rng(13);
  const auto p = init_marble(tiny_dims(HeadKind::Classification), rng);
  const std::string good = checkpoint_bytes(p);
  const std::string path = temp_path("bad.bin");
  auto load_bytes = [&](const std::string& bytes) {
    std::ofstream(path, std::ios::binary) << bytes;
    return load_checkpoint(path);
  };
  std::string magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_bytes(magic), CheckpointError);
  std::string version = good;
  version[4] = 9;
  CHECK_THROWS_AS(load_bytes(version), CheckpointError);
  CHECK_THROWS_AS(load_bytes(good.substr(0, good.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(load_bytes(good + "x"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.bin")), CheckpointError);
  for (int trial = 0; trial < 200; ++trial) {
    std::string cut = good.substr(0, rng.below(good.size()));
    CHECK_THROWS_AS(load_bytes(cut), CheckpointError);
  }
}
