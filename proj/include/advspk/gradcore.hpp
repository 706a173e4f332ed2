#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// Every op below builds a node that remembers its parents and an adjoint
// rule. Calling backward() on a scalar walks the graph in reverse
// topological order. Gradients of all reachable nodes are reset at the start
// of each backward call.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "advspk/tensor.hpp"

namespace advspk {

namespace detail {
struct Node;
}

class Value {
 public:
  Value() = default;

  /// Graph input. Only leaves flagged requires_grad receive gradients.
  static Value leaf(Tensor data, bool requires_grad = false);
  static Value constant(Tensor data) { return leaf(std::move(data), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& data() const;
  const Shape& shape() const { return data().shape(); }
  bool requires_grad() const;
  /// Scalar value; throws if not a single element.
  double item() const;

  bool has_grad() const;
  const Tensor& grad() const;

  const char* op_name() const;

 private:
  explicit Value(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Value make_op(Tensor, const char*, std::vector<Value>, std::function<void(detail::Node&)>);
  friend detail::Node& node_of(const Value&);
  friend void backward(const Value&);
};

/// Populate grad() on every requires_grad node reachable from a scalar loss.
void backward(const Value& loss);

namespace ag {

enum class NormMode { kTrain, kEval };

/// Running statistics owned by a batch-norm layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

struct BatchNormOptions {
  NormMode mode = NormMode::kEval;
  /// Train mode only: when set, batch statistics are folded into this state.
  BatchNormState* running_update = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Elementwise. Binary ops require identical shapes.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value add_scalar(const Value& a, double c);
Value square(const Value& a);
Value relu(const Value& a);
Value log(const Value& a);
Value exp(const Value& a);
/// Gradient passes where lo <= x <= hi.
Value clamp(const Value& a, double lo, double hi);
/// Rounds to a grid of width `step`. Adjoint is identity at points already on
/// the grid and zero elsewhere.
Value quantize(const Value& a, double step);

// Reductions.
Value sum(const Value& a);
Value mean(const Value& a);
/// [n, C, L] -> [n, C], averaging over L.
Value mean_last(const Value& a);

// Linear algebra. Rank-2 operands.
Value matmul(const Value& a, const Value& b);
/// x [n, D], weight [K, D], bias [K] (bias may be undefined) -> [n, K].
Value linear(const Value& x, const Value& weight, const Value& bias);

// Shape manipulation.
Value reshape(const Value& a, Shape shape);
/// Swap the last two axes of a rank-3 tensor, or transpose a rank-2 tensor.
Value transpose(const Value& a);
/// [n, T] -> [n * frames, width] with frames = (T - width) / hop + 1.
Value frame(const Value& signal, std::size_t width, std::size_t hop);

// Convolutional layers on [n, C, L].
/// weight [Cout, Cin, K], bias [Cout] or undefined; zero padding on both ends.
Value conv1d(const Value& x, const Value& weight, const Value& bias, std::size_t padding = 0);
/// Window = stride = width; trailing samples that do not fill a window are dropped.
/// Ties resolve to the lowest index.
Value max_pool1d(const Value& x, std::size_t width);
/// x is [n, C] or [n, C, L]; statistics per channel.
/// Eval mode normalizes with `state`; train mode with batch statistics.
Value batch_norm(const Value& x, const Value& gamma, const Value& beta, const BatchNormState& state,
                 const BatchNormOptions& options);

// Row-wise ops on [n, K].
Value softmax(const Value& a);
Value log_softmax(const Value& a);
/// [n, K] -> [n]: entry labels[i] of row i.
Value pick(const Value& a, std::span<const int> labels);
/// [n, K] -> [n]: max over j != labels[i]; ties resolve to the lowest index.
Value max_excluding(const Value& a, std::span<const int> labels);
/// [n, D] -> [n]. Zero rows are an error.
Value l2_norm(const Value& a);
/// a [n, D], b [m, D] -> [n, m] of pairwise cosine similarities.
Value cosine_similarity(const Value& a, const Value& b);

}  // namespace ag

struct FiniteDiffOptions {
  double step = 1e-5;
  /// Lower bound on the denominator of the relative error.
  double floor = 1e-8;
};

/// Largest relative discrepancy between the analytic gradient of `loss_fn` at
/// `point` and central differences, over all coordinates.
double finite_diff_check(const std::function<Value(const Value&)>& loss_fn, const Tensor& point,
                         const FiniteDiffOptions& options = {});

}  // namespace advspk
