// Copyright 2026 The pasdl Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PASDL_TESTS_TEST_UTIL_HPP
#define PASDL_TESTS_TEST_UTIL_HPP

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pasdl/array4.hpp"
#include "pasdl/autodiff.hpp"

namespace pasdl::testutil {

inline diff::Array4 random_array(diff::Shape4 s, std::uint64_t seed,
                                 double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  diff::Array4 a(s);
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = dist(rng);
  return a;
}

/// Central finite difference of a rebuilt scalar loss w.r.t. one parameter
/// entry. `loss_fn` must construct a fresh graph and return the loss value.
inline double fd_grad(diff::Parameter& p, std::int64_t idx,
                      const std::function<double()>& loss_fn, double h = 1e-5) {
  const double orig = p.value[idx];
  p.value[idx] = orig + h;
  const double lp = loss_fn();
  p.value[idx] = orig - h;
  const double lm = loss_fn();
  p.value[idx] = orig;
  return (lp - lm) / (2.0 * h);
}

inline double rel_err(double a, double b) {
  const double m = std::max(std::fabs(a), std::fabs(b));
  if (m < 1e-6) return 0.0;  // both negligible
  return std::fabs(a - b) / m;
}

/// Checks analytic gradients of every parameter against central differences
/// on up to `max_coords` sampled entries per parameter. Returns the worst
/// relative error observed.
inline double fd_check_params(std::vector<diff::Parameter*> params,
                              const std::function<double()>& loss_fn,
                              const std::function<void()>& backward_fn,
                              std::uint64_t seed, int max_coords = 8,
                              double h = 1e-5) {
  for (auto* p : params) p->zero_grad();
  backward_fn();
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto* p : params) {
    const std::int64_t n = p->value.numel();
    std::vector<std::int64_t> idx;
    if (n <= max_coords) {
      for (std::int64_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<std::int64_t> d(0, n - 1);
      for (int i = 0; i < max_coords; ++i) idx.push_back(d(rng));
    }
    for (std::int64_t i : idx) {
      const double fd = fd_grad(*p, i, loss_fn, h);
      worst = std::max(worst, rel_err(fd, p->grad[i]));
    }
  }
  return worst;
}

}  // namespace pasdl::testutil

#endif  // PASDL_TESTS_TEST_UTIL_HPP
