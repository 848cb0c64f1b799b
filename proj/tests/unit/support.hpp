#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mqe_align/config.hpp"
#include "mqe_align/diff/tensor.hpp"
#include "mqe_align/rng.hpp"

namespace testing {

template <typename Real>
mqe::Tensor<Real> random_tensor(mqe::Shape shape, mqe::Rng& rng, double scale = 1.0,
                                bool grad = false) {
  std::vector<Real> v(mqe::shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(scale * rng.normal());
  mqe::Tensor<Real> t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

/// Central differences of `loss` with respect to every element of `param`,
/// compared against the gradient left there by one backward pass. Returns
/// ||a - n|| / max(||a||, ||n||).
template <typename Real>
double fd_relative_error(mqe::Tensor<Real> param, const std::function<mqe::Tensor<Real>()>& loss,
                         double h) {
  param.zero_grad();
  loss().backward();
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const Real keep = param[i];
    param[i] = static_cast<Real>(keep + h);
    const double up = loss().item();
    param[i] = static_cast<Real>(keep - h);
    const double down = loss().item();
    param[i] = keep;
    const double numeric = (up - down) / (2 * h);
    diff += (analytic[i] - numeric) * (analytic[i] - numeric);
    na += analytic[i] * analytic[i];
    nn += numeric * numeric;
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  return denom == 0 ? 0 : std::sqrt(diff) / denom;
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mqe_align_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Small desk configuration for fast model tests.
inline mqe::Config tiny_config() {
  auto cfg = mqe::Config::profile("desk");
  cfg.set("lm.prior_steps", "0");
  cfg.set("data.points", "128");
  return cfg;
}

}  // namespace testing
