#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "trelm/tensor.hpp"

namespace trelm {

struct FiniteDiffOptions {
  double h = 1e-5;
  /// All coordinates are checked when the parameters hold at most this many;
  /// otherwise this many are sampled without replacement.
  std::size_t max_coords = 200;
  std::uint64_t seed = 0;
};

/// Compares analytic gradients against central differences of `f`.
///
/// `f` must read the tensors in `params`; they are perturbed in place and
/// restored bitwise. Returns the maximum over checked coordinates of
/// |analytic - fd| / max(1e-12, |fd|).
double finite_diff_check(const std::function<double()>& f, std::span<Tensor* const> params,
                         std::span<const Tensor> analytic, const FiniteDiffOptions& options = {});

}  // namespace trelm
