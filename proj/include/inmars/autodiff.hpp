#pragma once

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// A Graph is a tape: every op appends a node holding its forward value and a
// closure that pushes the node's gradient into its inputs. backward() walks the
// tape once in reverse. Graphs are single-use and not thread-safe.

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "inmars/tensor.hpp"

namespace inmars::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph;
using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

class Graph {
 public:
  /// Leaf node. Gradients are only accumulated for leaves with requires_grad.
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op node. `inputs` decide whether the node needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

  /// Gradient of a node after backward(); zeros if nothing reached it.
  Tensor grad(Var v) const;

  /// Mutable gradient buffer for use inside backward closures (allocated lazily).
  Tensor& grad_buffer(Var v);

  void backward(Var scalar);
  void backward(std::span<const std::pair<Var, Tensor>> seeds);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- generic ops ---------------------------------------------------------

Var add(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
/// Sum of scalars with fixed weights.
Var weighted_sum(Graph& g, std::span<const Var> scalars, std::span<const double> weights);
/// Sum of all elements.
Var sum(Graph& g, Var a);
/// <a, w> for a constant tensor w of the same shape.
Var dot_constant(Graph& g, Var a, const Tensor& w);

enum class Activation { relu, tanh };
Var activate(Graph& g, Var x, Activation kind);

/// Same-padded stride-1 convolution. x: (c,h,w), weight: (o,c,k,k) with odd k, bias: (o).
Var conv2d(Graph& g, Var x, Var weight, Var bias);
/// 2x2 average pooling, (c,h,w) -> (c,h/2,w/2). h and w must be even.
Var avg_pool2(Graph& g, Var x);
/// Nearest-neighbour 2x upsampling.
Var upsample2(Graph& g, Var x);
/// Channel concatenation of two (c,h,w) maps.
Var concat_channels(Graph& g, Var a, Var b);
/// Elementwise multiply of a (c,h,w) map by a constant (h,w) mask.
Var mask_pixels(Graph& g, Var x, const Mask& mask);

/// x: (r,f), weight: (f,o), bias: (o) -> (r,o).
Var linear(Graph& g, Var x, Var weight, Var bias);
Var softmax_rows(Graph& g, Var x);
Var concat_rows(Graph& g, std::span<const Var> parts);
Var select_rows(Graph& g, Var x, std::span<const int> rows);

/// Sparse linear read-out of a flat tensor into a (rows, features) matrix:
/// out[i] = sum_j weight_j * x[source_j] for entries in [offsets[i], offsets[i+1]).
struct SparsePlan {
  int rows = 0;
  int features = 0;
  std::vector<int> offsets;  // rows*features + 1
  std::vector<int> sources;
  std::vector<double> weights;

  void start_element() { offsets.push_back(static_cast<int>(sources.size())); }
  void add(int source, double weight) {
    sources.push_back(source);
    weights.push_back(weight);
  }
  void finish() { offsets.push_back(static_cast<int>(sources.size())); }
  Tensor apply(std::span<const double> x) const;
};
Var gather_sparse(Graph& g, Var x, SparsePlan plan);

/// Per-pixel gather of a (c,h,w) map: out[:,p] = x[:,index[p]], or 0 where index[p] < 0.
Var gather_pixels(Graph& g, Var x, std::vector<int> index);

}  // namespace inmars::ad
