#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Graph is a tape: every op appends a node holding its forward value and a
// closure that pushes the node's gradient back to its inputs. Nodes are
// appended in evaluation order, so walking the tape backwards is a valid
// topological order. Graphs are single-use and single-threaded; build one per
// forward/backward pass.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "evflow/matrix.hpp"

namespace evflow::ad {

/// A named learnable tensor plus its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

class Graph;

/// Handle to a node on a Graph. Cheap to copy.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr; }
  Graph& graph() const noexcept { return *graph_; }
  int id() const noexcept { return id_; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double scalar() const { return value().data.at(0); }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Matrix value);
  /// Leaf bound to a parameter; backward() adds into p.grad.
  Var param(Parameter& p);

  /// Runs reverse accumulation from a 1x1 root.
  void backward(Var root);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].value; }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }
  /// Gradient buffer of a node, allocated (zeroed) on first access.
  Matrix& grad(Var v);
  /// Gradient of a node after backward(); empty when nothing reached it.
  const Matrix& grad_or_empty(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Appends an op node. `backward` is dropped when no input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

using Rng = std::mt19937_64;

// ---- elementwise ----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var square(Var a);
Var reciprocal(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var gelu(Var a);  // tanh approximation
Var sin(Var a);
Var cos(Var a);

// ---- linear algebra ---------------------------------------------------------
Var matmul(Var a, Var b);
/// x * w + b, with b a [1 x out] row broadcast over rows of x.
Var linear(Var x, Var w, Var b);

// ---- broadcasting -----------------------------------------------------------
/// x[n x c] (op) r[1 x c] applied to every row.
Var mul_row(Var x, Var r);
/// x[G*n x c] (op) s[G x c] (or s[G x 1]) where row block g uses row g of s.
Var group_mul(Var x, Var s);
Var group_add(Var x, Var s);
/// x[G*n x c] + p[n x c] tiled over the G blocks.
Var add_tiled(Var x, Var p);
/// p[n x c] repeated `times` times vertically.
Var tile_rows(Var p, std::size_t times);

// ---- shape ------------------------------------------------------------------
Var reshape(Var x, std::size_t rows, std::size_t cols);
Var concat_cols(Var a, Var b);
Var slice_cols(Var x, std::size_t begin, std::size_t end);

// ---- normalization / attention / regularization ------------------------------
/// Per-row standardization without affine parameters.
Var layer_norm(Var x, double eps = 1e-6);
/// Grouped multi-head scaled dot-product attention; see kernels::AttentionShape.
/// Dropout on the attention probabilities when rate > 0 (rng must be non-null).
Var attention(Var q, Var k, Var v, std::size_t groups, std::size_t heads, double dropout = 0.0, Rng* rng = nullptr);
Var dropout(Var x, double rate, Rng* rng);

// ---- reductions --------------------------------------------------------------
Var sum(Var x);
Var mean(Var x);
/// mean((a - b)^2) as a 1x1 node.
Var mse(Var a, Var b);

}  // namespace evflow::ad
