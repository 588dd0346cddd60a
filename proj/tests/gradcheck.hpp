#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "storyviz/autograd.hpp"
#include "storyviz/rng.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz::testing {

// Central finite-difference check of a scalar-valued function of several
// tensors. `fn` rebuilds the graph from the current parameter values and
// returns the scalar loss; analytic gradients are read from the params after
// one backward pass and compared per element against (f(x+h) - f(x-h)) / 2h.
//
// Returns the worst relative error max(|a - n| / max(denom_floor, |a| + |n|)).
template <typename T>
double gradcheck(std::vector<Param<T>*> params,
                 const std::function<T()>& fn_with_backward,
                 const std::function<T()>& fn_value_only, T step,
                 double denom_floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  fn_with_backward();
  std::vector<Tensor<T>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param<T>& p = *params[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      const T saved = p.value[i];
      p.value[i] = saved + step;
      const double f_plus = static_cast<double>(fn_value_only());
      p.value[i] = saved - step;
      const double f_minus = static_cast<double>(fn_value_only());
      p.value[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max(denom_floor, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// Convenience overload when the same callable can serve both roles (it must
// run backward internally and return the loss).
template <typename T>
double gradcheck(std::vector<Param<T>*> params, const std::function<T()>& fn, T step,
                 double denom_floor = 1e-6) {
  auto value_only = fn;
  return gradcheck<T>(std::move(params), fn, value_only, step, denom_floor);
}

// Same check restricted to `per_param` randomly chosen elements of each
// parameter, for modules whose full element count would make exhaustive
// finite differences take minutes.
template <typename T>
double gradcheck_sampled(std::vector<Param<T>*> params, const std::function<T()>& fn,
                         T step, int64_t per_param, Rng& rng,
                         double denom_floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  fn();
  std::vector<Tensor<T>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param<T>& p = *params[pi];
    for (int64_t s = 0; s < std::min(per_param, p.numel()); ++s) {
      const int64_t i = p.numel() <= per_param
                            ? s
                            : static_cast<int64_t>(rng.uniform_int(p.numel()));
      const T saved = p.value[i];
      p.value[i] = saved + step;
      const double f_plus = static_cast<double>(fn());
      p.value[i] = saved - step;
      const double f_minus = static_cast<double>(fn());
      p.value[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max(denom_floor, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 0.5) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

}  // namespace storyviz::testing
