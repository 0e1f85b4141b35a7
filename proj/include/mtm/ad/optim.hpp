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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "mtm/ad/tensor.hpp"

namespace mtm::ad {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First and second moments keyed by parameter name.
template <class T>
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

// One bias-corrected Adam update using each parameter's accumulated grad.
template <class T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr, const AdamOptions& opt = {}) {
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (auto& p : params) {
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.shape != p.value.shape) m = Tensor<T>(p.value.shape);
    if (v.shape != p.value.shape) v = Tensor<T>(p.value.shape);
    if (p.grad.size() != p.value.size()) p.zero_grad();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.data[i];
      const double mi = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * g;
      const double vi = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * g * g;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      p.value.data[i] = static_cast<T>(p.value.data[i] - lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

// Linear warmup: base_lr * min(1, step / warmup_steps); step counts from 1.
inline double warmup_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps) {
  if (warmup_steps <= 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

}  // namespace mtm::ad
