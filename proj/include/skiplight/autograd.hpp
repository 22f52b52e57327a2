#pragma once

#include <deque>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "skiplight/matrix.hpp"

/// Minimal reverse-mode automatic differentiation over dense matrices.
///
/// A Tape records every operation in creation order; backward() walks it in
/// reverse. Values are immutable once recorded. Gradients are only tracked for
/// nodes that depend on a leaf created with requires_grad, so frozen
/// parameters and inference passes cost no backward bookkeeping.
namespace skiplight::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Owned value without gradient tracking.
  Var constant(Matrix value);
  /// Owned value with gradient tracking.
  Var variable(Matrix value);
  /// Non-owning leaf; `value` must outlive the tape. Its gradient is reported
  /// by param_grads() under `name` when `trainable`.
  Var parameter(const std::string& name, const Matrix& value, bool trainable = true);

  bool grad_enabled() const { return grad_enabled_; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  const Matrix& value(Var v) const { return nodes_[v.id()].value_ref(); }
  /// Gradient accumulated by backward(); zero matrix if never reached.
  Matrix grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and propagates.
  void backward(Var loss);

  /// Gradients of all trainable parameter leaves, by name.
  std::map<std::string, Matrix> param_grads() const;

  std::size_t size() const { return nodes_.size(); }

  // Used by operation implementations.
  using Backward = std::function<void(const Matrix& grad_out)>;
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  /// Adds `delta` into the gradient of `v` (no-op for untracked nodes).
  void accumulate(Var v, const Matrix& delta);
  Matrix& grad_buffer(Var v);

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
    const Matrix& value_ref() const { return external ? *external : value; }
  };
  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::vector<std::pair<std::string, int>> params_;
};

// ---- operations ----

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
/// Elementwise product.
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
/// x * W^T + b, W stored out x in, b a 1 x out row.
Var linear(Var x, Var weight, Var bias);
/// Adds a 1 x n row to every row.
Var add_row(Var x, Var row);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gather_rows(Var table, std::span<const int> ids);
/// out[s] = x[s - k] for s >= k, zero rows above.
Var shift_rows(Var x, int k);
Var mean_rows(Var x);
Var dropout(Var x, double p, std::mt19937_64& rng);

/// Multi-head scaled dot-product attention. q: T x d, k/v: S x d.
/// With `causal`, query t sees keys 0..t only.
Var attention(Var q, Var k, Var v, int heads, bool causal);
/// Row-stochastic attention weights of one head, for inspection.
Matrix attention_weights(const Matrix& q, const Matrix& k, int heads, int head, bool causal);

/// Mean over rows of -log softmax(logits)[target]. 1x1 result.
Var cross_entropy(Var logits, std::span<const int> targets);
/// Mean squared error over the selected rows (all rows when `rows` is empty).
Var mse(Var pred, const Matrix& target, std::span<const int> rows = {});

Matrix softmax_rows(const Matrix& logits);

}  // namespace skiplight::ad
