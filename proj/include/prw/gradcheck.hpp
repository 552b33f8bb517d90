#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "prw/tensor.hpp"

namespace prw {

// Central-difference estimate (f(p + h e_i) - f(p - h e_i)) / 2h for each
// coordinate of `params`. `f` receives the perturbed copy.
template <class F>
Tensor finite_difference_gradient(F&& f, const Tensor& params, double step = 1e-5) {
  if (!(step > 0.0)) throw Error("finite_difference_gradient: step must be positive");
  Tensor probe(params.shape, params.data);
  Tensor out(params.shape);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + step;
    const double up = f(static_cast<const Tensor&>(probe));
    probe.data[i] = orig - step;
    const double down = f(static_cast<const Tensor&>(probe));
    probe.data[i] = orig;
    out.data[i] = (up - down) / (2.0 * step);
  }
  return out;
}

// In-place variant for parameters that live inside a larger structure: perturbs
// `params` directly and restores every coordinate. Only `coords` are probed
// (all of them when empty); the rest of the result is zero.
inline Tensor finite_difference_gradient_inplace(const std::function<double()>& f, Tensor& params,
                                                 double step = 1e-5,
                                                 const std::vector<std::size_t>& coords = {}) {
  if (!(step > 0.0)) throw Error("finite_difference_gradient: step must be positive");
  Tensor out(params.shape);
  auto probe = [&](std::size_t i) {
    const double orig = params.data[i];
    params.data[i] = orig + step;
    const double up = f();
    params.data[i] = orig - step;
    const double down = f();
    params.data[i] = orig;
    out.data[i] = (up - down) / (2.0 * step);
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) probe(i);
  } else {
    for (auto i : coords) probe(i);
  }
  return out;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
// derivative is ~0 from dominating through round-off.
inline double relative_error(double a, double b, double floor = 1e-6) {
  const double denom = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / denom;
}

inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 const std::vector<std::size_t>& coords = {}, double floor = 1e-6) {
  if (analytic.size() != numeric.size()) throw ShapeError("max_relative_error: size mismatch");
  double worst = 0.0;
  if (coords.empty()) {
    for (std::size_t i = 0; i < analytic.size(); ++i)
      worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  } else {
    for (auto i : coords) worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  }
  return worst;
}

}  // namespace prw
