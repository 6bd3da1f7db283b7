#include "trelm/optim.hpp"

#include <algorithm>

#include "trelm/errors.hpp"

namespace trelm {

ParamMask::ParamMask(std::vector<Shape> shapes, bool value) : shapes_(std::move(shapes)) {
  bits_.reserve(shapes_.size());
  for (const auto& s : shapes_) bits_.emplace_back(shape_size(s), value ? 1 : 0);
}

void ParamMask::fill(ParamId id, bool value) {
  auto& b = bits_.at(id);
  std::fill(b.begin(), b.end(), value ? 1 : 0);
}

std::size_t ParamMask::count_true(ParamId id) const {
  const auto& b = bits_.at(id);
  return static_cast<std::size_t>(std::count(b.begin(), b.end(), std::uint8_t{1}));
}

namespace {

void check_shapes(std::span<Tensor> params, const GradientStore& grads, const ParamMask* mask) {
  if (grads.size() != params.size()) throw ShapeError("gradient store / parameter count mismatch");
  for (ParamId id = 0; id < params.size(); ++id) {
    if (grads.shape(id) != params[id].shape()) {
      throw ShapeError("gradient shape mismatch for parameter " + std::to_string(id));
    }
  }
  if (mask == nullptr) return;
  if (mask->size() != params.size()) throw ShapeError("mask / parameter count mismatch");
  for (ParamId id = 0; id < params.size(); ++id) {
    if (mask->shape(id) != params[id].shape()) {
      throw ShapeError("mask shape " + shape_string(mask->shape(id)) + " does not match parameter " +
                       std::to_string(id) + " " + shape_string(params[id].shape()));
    }
  }
}

}  // namespace

void sgd_step(std::span<Tensor> params, const GradientStore& grads, double lr,
              const ParamMask* mask) {
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  check_shapes(params, grads, mask);
  for (ParamId id = 0; id < params.size(); ++id) {
    const Tensor* g = grads.find(id);
    if (g == nullptr) continue;
    Tensor& p = params[id];
    if (mask == nullptr) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (*g)[i];
    } else {
      const auto bits = mask->bits(id);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (bits[i]) p[i] -= lr * (*g)[i];
      }
    }
  }
}

SgdOptimizer::SgdOptimizer(SgdOptions options, std::vector<Shape> shapes)
    : options_(options), shapes_(std::move(shapes)) {
  if (!(options_.lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (options_.momentum < 0.0 || options_.momentum >= 1.0) {
    throw ValidationError("momentum must be in [0, 1)");
  }
  if (options_.momentum > 0.0) {
    for (const auto& s : shapes_) velocity_.emplace_back(s);
  }
}

void SgdOptimizer::set_velocity(std::vector<Tensor> velocity) {
  if (velocity.size() != velocity_.size()) throw ShapeError("velocity buffer count mismatch");
  for (std::size_t i = 0; i < velocity.size(); ++i) {
    if (velocity[i].shape() != velocity_[i].shape()) throw ShapeError("velocity shape mismatch");
  }
  velocity_ = std::move(velocity);
}

void SgdOptimizer::step(std::span<Tensor> params, const GradientStore& grads,
                        const ParamMask* mask) {
  if (options_.momentum == 0.0) {
    sgd_step(params, grads, options_.lr, mask);
    return;
  }
  check_shapes(params, grads, mask);
  const double mu = options_.momentum;
  const double lr = options_.lr;
  for (ParamId id = 0; id < params.size(); ++id) {
    const Tensor* g = grads.find(id);
    Tensor& p = params[id];
    Tensor& v = velocity_[id];
    const std::uint8_t* bits = mask != nullptr ? mask->bits(id).data() : nullptr;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (bits != nullptr && !bits[i]) continue;
      const double gi = g != nullptr ? (*g)[i] : 0.0;
      v[i] = mu * v[i] + gi;
      p[i] -= lr * v[i];
    }
  }
}

}  // namespace trelm
