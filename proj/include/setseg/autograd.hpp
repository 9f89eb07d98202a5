#pragma once

#include "setseg/common.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

// Minimal reverse-mode differentiation over dense matrices. Every op records
// its output value and a closure that maps the output gradient onto its
// inputs; Tape::backward replays the closures in reverse creation order.

namespace setseg::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Var constant(Matrix v) { return push(std::move(v), false, {}); }
  Var variable(Matrix v) { return push(std::move(v), true, {}); }

  /// Records an op result. `needs_grad` should be true iff some input needs a
  /// gradient; the closure is dropped otherwise.
  Var push(Matrix value, bool needs_grad, Backward backward);

  const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  bool needs_grad(Var v) const { return needs_grad(v.id); }

  /// Adds `g` into the gradient of `id` (ignored for constants).
  void accumulate(int id, const Matrix& g);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates backwards.
  void backward(Var root);
  /// Gradient of the last backward root with respect to `v`; zeros if unreached.
  Matrix grad(Var v) const;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

// Named parameter tensors. Ordered so iteration (and therefore checkpoints and
// optimizer updates) is deterministic.
using ParamStore = std::map<std::string, Matrix>;

/// Binds parameters from a store as tape variables on first use and collects
/// their gradients after backward.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamStore& store, bool trainable = true) : tape_(tape), store_(store), trainable_(trainable) {}
  Var operator()(const std::string& name);
  bool contains(const std::string& name) const { return store_.count(name) != 0; }
  /// Gradients for every bound parameter; unbound parameters get zeros.
  ParamStore gradients() const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

// ---- ops ------------------------------------------------------------------

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double c);
Var hadamard(Var a, Var b);
Var sum(Var a);
Var sum(const std::vector<Var>& scalars);

Var gelu(Var a);
Var sigmoid(Var a);
Var clamp(Var a, double lo, double hi);

/// Row-wise softmax.
Var softmax_rows(Var a);
/// Row-wise layer normalization with 1 x n scale and shift.
Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);

/// Row-major reinterpretation.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Stacks `count` copies of a 1 x n row.
Var repeat_rows(Var row, Eigen::Index count);
/// Column means (1 x n).
Var mean_rows(Var a);
/// Column maxima (1 x n); the gradient goes to the first maximal row.
Var max_rows(Var a);

/// out.row(b) = sum over taps[b] of weight * a.row(index). Used for RoIAlign
/// and bilinear resampling.
using Taps = std::vector<std::vector<std::pair<int, double>>>;
Var gather_weighted(Var a, std::shared_ptr<const Taps> taps);

/// 2-D convolution on a pixel-major (height*width) x in_channels map.
/// weight: (kernel*kernel*in_channels) x out_channels, rows ordered
/// (ky, kx, channel); bias 1 x out_channels; zero padding.
struct ConvShape {
  int height = 0, width = 0, kernel = 3, stride = 1, pad = 1;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};
Var conv2d(Var input, Var weight, Var bias, const ConvShape& shape);

/// Exact GELU: x * Phi(x).
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace setseg::ad
