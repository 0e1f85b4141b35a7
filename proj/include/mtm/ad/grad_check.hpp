// Copyright 2026 The mtmkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Finite-difference gradient checking against central differences
// (f(x+eps) - f(x-eps)) / 2 eps. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8).

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mtm/ad/tape.hpp"
#include "mtm/ad/tensor.hpp"

namespace mtm::ad {

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// f maps a variable on a fresh tape to a scalar Var.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

inline double grad_check(const ScalarFn& f, const Tensor<double>& theta, double eps = 1e-4,
                         std::optional<std::vector<std::size_t>> indices = std::nullopt) {
  std::vector<double> analytic;
  {
    Tape<double> tape;
    auto x = tape.variable(theta);
    auto y = f(tape, x);
    tape.backward(y);
    analytic = tape.grad(x.id);
  }
  auto eval = [&](const Tensor<double>& t) {
    Tape<double> tape;
    auto x = tape.constant(t);
    return f(tape, x).value().data[0];
  };
  std::vector<std::size_t> idx;
  if (indices) {
    idx = *indices;
  } else {
    idx.resize(theta.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  double worst = 0.0;
  Tensor<double> probe = theta;
  for (std::size_t i : idx) {
    const double orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double fp = eval(probe);
    probe.data[i] = orig - eps;
    const double fm = eval(probe);
    probe.data[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

struct ParameterCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Gradient check of a model loss with respect to every tensor in a
// parameter set. `loss` must build the full computation on the given tape
// (binding parameters with tape.parameter). Up to `per_tensor` coordinates
// are sampled from each tensor (all of them when the tensor is smaller).
inline std::vector<ParameterCheck> grad_check_parameters(
    const std::function<Var<double>(Tape<double>&)>& loss, ParameterSet<double>& params,
    std::size_t per_tensor, std::uint64_t seed, double eps = 1e-4) {
  params.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  std::vector<Tensor<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad);
  auto eval = [&]() {
    Tape<double> tape;
    return loss(tape).value().data[0];
  };
  std::mt19937_64 rng(seed);
  std::vector<ParameterCheck> out;
  std::size_t k = 0;
  for (auto& p : params) {
    ParameterCheck check{p.name, 0.0, 0};
    std::vector<std::size_t> idx;
    if (p.value.size() <= per_tensor) {
      for (std::size_t i = 0; i < p.value.size(); ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
      for (std::size_t i = 0; i < per_tensor; ++i) idx.push_back(pick(rng));
    }
    for (std::size_t i : idx) {
      const double orig = p.value.data[i];
      p.value.data[i] = orig + eps;
      const double fp = eval();
      p.value.data[i] = orig - eps;
      const double fm = eval();
      p.value.data[i] = orig;
      check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[k].data[i], (fp - fm) / (2.0 * eps)));
      ++check.checked;
    }
    out.push_back(check);
    ++k;
  }
  return out;
}

}  // namespace mtm::ad
