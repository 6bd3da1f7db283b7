#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive applied to its Vars in creation order, which
// is a valid topological order. backward() walks it once in reverse. Model
// parameters enter the tape by reference and their gradients are accumulated
// into a caller-owned GradientStore, so several tapes (one per sequence) can
// share one store.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "trelm/tensor.hpp"

namespace trelm {

using ParamId = std::size_t;

/// Per-parameter gradient buffers, allocated on first touch.
class GradientStore {
 public:
  GradientStore() = default;
  explicit GradientStore(std::vector<Shape> shapes);

  std::size_t size() const { return shapes_.size(); }
  const Shape& shape(ParamId id) const { return shapes_.at(id); }

  /// Buffer for `id`, zero-filled on first access.
  Tensor& at(ParamId id);
  /// nullptr when `id` never received a gradient.
  const Tensor* find(ParamId id) const;
  /// Gradient for `id`, or zeros when it never received one.
  Tensor get(ParamId id) const;

  void add(const GradientStore& other);
  void clear();

 private:
  std::vector<Shape> shapes_;
  std::vector<Tensor> grads_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class GradMode { enabled, disabled };

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(GradMode mode = GradMode::enabled, GradientStore* param_grads = nullptr);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  GradMode mode() const { return mode_; }

  /// A value that never receives a gradient.
  Var constant(Tensor value);
  /// A differentiable input whose gradient can be read back with grad().
  Var leaf(Tensor value);
  /// A model parameter, held by reference. Without a GradientStore it acts as a constant.
  Var parameter(ParamId id, const Tensor& value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Runs reverse accumulation from a scalar. A tape can be differentiated once.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  /// Gradient of a non-parameter node after backward(); zeros when unreached.
  const Tensor& grad(Var v);

  std::size_t size() const { return nodes_.size(); }

  // -- used by primitive implementations --

  /// Appends an op output. `fn` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  /// Gradient accumulator for `v`, zero-initialized on first use.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    ParamId param = 0;
    bool is_param = false;
    bool requires_grad = false;
    Tensor grad;
    BackwardFn backward;
  };

  void check_owner(Var v) const;

  GradMode mode_;
  GradientStore* param_grads_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Differentiable primitives. Rank-1 operands are treated as single rows.
namespace ops {

inline constexpr double kLayerNormEps = 1e-5;

Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_bt(Var a, Var b);  // [m,k] x [n,k]^T
Var add(Var a, Var b);
Var add_row(Var a, Var bias);  // [m,n] + [n] broadcast over rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
Var softmax_rows(Var x);
/// tanh approximation of GELU.
Var gelu(Var x);
Var gather_rows(Var table, std::span<const std::uint32_t> ids);
Var mean_rows(Var x);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var select_rows(Var x, std::span<const std::size_t> rows);
/// Output equals `base` with the listed rows overwritten by the rows of `replacement`.
Var replace_rows(Var base, std::span<const std::size_t> rows, Var replacement);

struct EntryClamp {
  std::size_t index;  // flat index into the operand
  double value;
};
/// Forward-only clamp: overwrites entries; gradient reaches the operand only
/// through entries that were not clamped.
Var clamp_entries(Var x, std::span<const EntryClamp> clamps);

Var sum(Var x);
Var dot(Var a, Var b);
/// Mean over rows of -log softmax(logits_i)[targets_i].
Var cross_entropy(Var logits, std::span<const std::uint32_t> targets);

}  // namespace ops

double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace trelm
