#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "marble/tensor.hpp"

namespace marble {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Define-by-run reverse-mode tape. A fresh tape is built for every forward
// pass. With record=false the tape only holds forward values and skips all
// backward bookkeeping (inference mode).
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value);
  // Differentiable leaf; its gradient is available via grad() after backward.
  Var leaf(Tensor value);
  // Leaf that reads `value` in place and adds its gradient into `grad_sink`
  // (when non-null) at the end of backward. `value` must outlive the tape.
  Var param(const Tensor& value, Tensor* grad_sink);

  const Tensor& value(Var v) const;
  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient accumulated into node `id`, allocated zero-filled on first use.
  Tensor& grad_ref(std::size_t id);
  const Tensor& grad(Var v) const;

  // Records an op. `inputs` must already be on this tape. `fn` is dropped
  // when not recording or when no input needs a gradient. Throws
  // NumericError naming `op` if the value has a non-finite entry.
  Var push(std::string_view op, Tensor value, std::vector<std::size_t> inputs,
           BackwardFn fn);

  // Reverse sweep from a scalar node. Each node is visited once.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    Tensor* grad_sink = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  bool record_;
  bool done_ = false;
};

// Throws NumericError("<op>: non-finite value ...") if t has NaN/Inf.
void require_finite(const Tensor& t, std::string_view op);

// Elementwise and linear-algebra primitives. Every op records itself on the
// tape of its first argument.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_bias(Var m, Var bias);  // m[T x n] + bias[n] on every row
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
Var silu(Var a);
Var concat_last_dim(Var a, Var b);
Var gather_rows(Var t, std::span<const std::size_t> idx);
Var reshape(Var a, Shape shape);
Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);  // full contraction of equal-shape tensors
Var softmax_1d(Var v);
Var log_sum_exp(Var v);
Var pick(Var v, std::size_t i);
Var stack_scalars(std::span<const Var> scalars);

// Scalar helpers shared with the kernels above.
double softplus(double x);
double sigmoid(double x);

}  // namespace marble
