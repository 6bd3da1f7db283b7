#include "trelm/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "trelm/errors.hpp"

namespace trelm {

double finite_diff_check(const std::function<double()>& f, std::span<Tensor* const> params,
                         std::span<const Tensor> analytic, const FiniteDiffOptions& options) {
  if (!(options.h > 0.0)) throw ValidationError("finite difference step must be positive");
  if (params.size() != analytic.size()) throw ShapeError("one analytic gradient per parameter");
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->shape() != analytic[p].shape()) {
      throw ShapeError("analytic gradient shape mismatch for parameter " + std::to_string(p));
    }
    for (std::size_t i = 0; i < params[p]->size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > options.max_coords) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
  }

  auto eval = [&f]() {
    const double v = f();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: objective is not finite");
    return v;
  };

  double worst = 0.0;
  for (auto [p, i] : coords) {
    double& x = (*params[p])[i];
    const double saved = x;
    x = saved + options.h;
    const double up = eval();
    x = saved - options.h;
    const double down = eval();
    x = saved;
    const double fd = (up - down) / (2.0 * options.h);
    const double err = std::abs(analytic[p][i] - fd) / std::max(1e-12, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace trelm
