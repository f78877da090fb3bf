#pragma once

#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "eptlab/tensor.hpp"

namespace eptlab {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the output gradient and accumulates into the gradients of the
/// node's parents. A parent slot is nullptr when that parent does not lead to
/// any trainable leaf.
using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor*>& parent_grads)>;

/// Define-by-run computation graph. Nodes are appended in evaluation order, so
/// the node list is always a valid topological order.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Named leaf. Binding the same name twice returns the first node.
  Var parameter(const std::string& name, const Tensor& value, bool trainable);
  /// Binds `name` from `store`, trainable iff it is in `mask`.
  Var bind(const ParameterStore& store, const std::string& name, const std::set<std::string>& mask);

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  /// Reverse sweep from a scalar loss. Returns one gradient per trainable leaf
  /// reached by the graph (zeros when the loss does not depend on it).
  GradientMap backward(Var loss) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string name;
    bool trainable = false;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> named_;
};

/// Compute a loss and the gradients of every trainable leaf in one call.
GradientMap backward(Graph& graph, Var loss);

// Differentiable operations. Shapes are (rows, cols); rank-1 inputs act as
// columns.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
/// a[m x n] + bias[m] broadcast over columns.
Var add_column_broadcast(Var a, Var bias);
/// a[r x n] with column j multiplied by s[0, j] (s is 1 x n).
Var scale_columns(Var a, Var s);
Var relu(Var a);
/// Column-wise softmax with max shift.
Var softmax_columns(Var m);
/// Per-column (max - min), returned as 1 x n. Subgradient goes to the first
/// maximal and first minimal index.
Var column_range(Var m);
/// Repeats the rows of p cyclically (truncating) to `rows` rows.
Var tile_rows(Var p, std::size_t rows);
Var concat_rows(Var top, Var bottom);
Var concat_cols(Var left, Var right);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var sum(Var a);
/// Normalizes each column over its rows, then applies per-row gamma and beta.
Var layer_norm_columns(Var x, Var gamma, Var beta, double eps = 1e-6);
/// -log softmax(logits)[target]; logits is a column.
Var softmax_cross_entropy(Var logits, std::size_t target);
/// Mean over entries of binary cross-entropy with sigmoid scores.
Var sigmoid_binary_cross_entropy(Var logits, const std::vector<double>& targets);

}  // namespace eptlab
