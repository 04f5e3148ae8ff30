#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "marble/autodiff.hpp"
#include "marble/pyramid.hpp"
#include "marble/rng.hpp"
#include "marble/ssm.hpp"

namespace marble {

enum class HeadKind : std::uint8_t { Classification = 0, Survival = 1 };

std::string_view head_name(HeadKind head);
HeadKind parse_head(std::string_view s);

// Affine map stored input-major: y = x W + b with W [in x out].
template <class T>
struct Linear {
  T weight;
  T bias;
};

// All trainable parameters: one SSM block per level, one fusion projection
// per level k >= 1 (2D -> D), the pooling vector, and exactly one head.
template <class T>
struct Marble {
  HeadKind head = HeadKind::Classification;
  std::vector<SsmBlock<T>> blocks;
  std::vector<Linear<T>> fuse;
  T pool_w;    // D
  T cls_w;     // C x D   (classification)
  T cls_b;     // C       (classification)
  T cox_beta;  // D       (survival)

  // Visits every active parameter with a stable name, in a fixed order.
  template <class F>
  void visit(F&& f) {
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      const std::string prefix = "block" + std::to_string(k) + ".";
      blocks[k].visit([&](std::string_view n, T& v) { f(prefix + std::string(n), v); });
    }
    for (std::size_t k = 0; k < fuse.size(); ++k) {
      const std::string prefix = "fuse" + std::to_string(k + 1) + ".";
      f(prefix + "weight", fuse[k].weight);
      f(prefix + "bias", fuse[k].bias);
    }
    f(std::string("pool_w"), pool_w);
    if (head == HeadKind::Classification) {
      f(std::string("cls_w"), cls_w);
      f(std::string("cls_b"), cls_b);
    } else {
      f(std::string("cox_beta"), cox_beta);
    }
  }
};

using MarbleParams = Marble<Tensor>;
using MarbleVars = Marble<Var>;

struct ModelDims {
  std::size_t d_model = 64;
  std::size_t inner = 128;
  std::size_t state = 16;
  std::size_t levels = 2;  // S + 1
  std::size_t classes = 2;
  HeadKind head = HeadKind::Classification;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

MarbleParams init_marble(const ModelDims& dims, Rng& rng);
ModelDims dims_of(const MarbleParams& p);
MarbleParams zeros_like(const MarbleParams& p);

// (name, tensor) for every active parameter, in visit order.
std::vector<std::pair<std::string, Tensor*>> named_tensors(MarbleParams& p);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const MarbleParams& p);

double squared_norm(const MarbleParams& p);
std::size_t parameter_count(const MarbleParams& p);

MarbleVars bind(Tape& tape, const MarbleParams& p, MarbleParams* grads);

// Gathers each fine token's parent row of `y_prev` and projects the 2D-wide
// concatenation [x_i || y_prev[parents[i]]] back to D.
Var fuse_level(Var x, Var y_prev, std::span<const std::size_t> parents, const Linear<Var>& phi);

struct Pooled {
  Var z;        // D
  Var weights;  // T
};

// softmax(Y w) weighted sum of the rows of Y.
Pooled attention_pool(Var y, Var w);
Var classify(Var z, Var cls_w, Var cls_b);
Var risk_score(Var z, Var beta);

struct SlideVars {
  std::vector<Var> levels;  // Y^(k), k = 0..S
  Var pooled;
  Var weights;
  Var head;  // logits [C] or scalar risk
  std::vector<std::size_t> level_order;  // levels in the order they were encoded
};

// Coarse-to-fine encoding: Y0 = M0(X0); Yk = Mk(fuse(Xk, Y(k-1))). Pools and
// applies the head on the finest level only.
SlideVars encode_slide(Tape& tape, const TokenBag& bag, const MarbleVars& params);

// Value snapshot of a forward pass without a recorded tape.
struct SlideOutput {
  std::vector<Tensor> levels;
  Tensor pooled;
  Tensor weights;
  Tensor head;
};

SlideOutput encode_slide(const TokenBag& bag, const MarbleParams& params);

// Binary checkpoint plus a key=value sidecar at `path + ".manifest"`.
void save_checkpoint(const MarbleParams& params, const std::string& path, std::uint64_t seed);
MarbleParams load_checkpoint(const std::string& path);
std::string checkpoint_bytes(const MarbleParams& params);
MarbleParams parse_checkpoint(std::string_view bytes);

}  // namespace marble
