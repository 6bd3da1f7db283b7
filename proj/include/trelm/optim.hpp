#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trelm/autodiff.hpp"
#include "trelm/tensor.hpp"

namespace trelm {

/// One boolean array per parameter, shaped like the parameter it masks.
class ParamMask {
 public:
  ParamMask() = default;
  ParamMask(std::vector<Shape> shapes, bool value);

  std::size_t size() const { return bits_.size(); }
  const Shape& shape(ParamId id) const { return shapes_.at(id); }

  std::span<std::uint8_t> bits(ParamId id) { return bits_.at(id); }
  std::span<const std::uint8_t> bits(ParamId id) const { return bits_.at(id); }
  bool get(ParamId id, std::size_t i) const { return bits_.at(id).at(i) != 0; }
  void set(ParamId id, std::size_t i, bool value) { bits_.at(id).at(i) = value ? 1 : 0; }
  void fill(ParamId id, bool value);

  std::size_t count_true(ParamId id) const;

  bool operator==(const ParamMask&) const = default;

 private:
  std::vector<Shape> shapes_;
  std::vector<std::vector<std::uint8_t>> bits_;
};

/// p <- p - lr * g on every entry where `mask` is true (or everywhere without a mask).
/// Masked-out entries are left bitwise untouched.
void sgd_step(std::span<Tensor> params, const GradientStore& grads, double lr,
              const ParamMask* mask = nullptr);

struct SgdOptions {
  double lr = 0.1;
  /// 0 gives plain SGD.
  double momentum = 0.0;
};

/// SGD with optional heavy-ball momentum. Velocity buffers of masked-out
/// entries are not advanced either, so a frozen entry stays frozen exactly.
class SgdOptimizer {
 public:
  SgdOptimizer(SgdOptions options, std::vector<Shape> shapes);

  const SgdOptions& options() const { return options_; }
  void step(std::span<Tensor> params, const GradientStore& grads, const ParamMask* mask = nullptr);

  const std::vector<Tensor>& velocity() const { return velocity_; }
  void set_velocity(std::vector<Tensor> velocity);

 private:
  SgdOptions options_;
  std::vector<Shape> shapes_;
  std::vector<Tensor> velocity_;
};

}  // namespace trelm
