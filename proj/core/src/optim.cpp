// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/optim.hpp"

#include <cmath>

namespace plaindet {

Tensor ParamStore::create(const std::string& name, Shape shape) {
  if (params_.count(name)) throw ConfigError("duplicate parameter " + name);
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::create_xavier(const std::string& name, Shape shape,
                                 Rng& rng) {
  if (shape.size() != 2 && shape.size() != 1) {
    throw ConfigError("xavier init expects rank 1 or 2 for " + name);
  }
  const int fan_in = shape.size() == 2 ? shape[0] : shape[0];
  const int fan_out = shape.size() == 2 ? shape[1] : shape[0];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = create(name, shape);
  for (double& v : t.values_mut()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor ParamStore::create_normal(const std::string& name, Shape shape,
                                 double stddev, Rng& rng) {
  Tensor t = create(name, std::move(shape));
  for (double& v : t.values_mut()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor ParamStore::create_const(const std::string& name, Shape shape,
                                double value) {
  Tensor t = create(name, std::move(shape));
  for (double& v : t.values_mut()) v = value;
  return t;
}

bool ParamStore::contains(const std::string& name) const {
  return params_.count(name) != 0;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

std::int64_t ParamStore::total_coords() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& [_, t] : params_) {
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void ParamStore::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (auto& [_, t] : params_) {
    Tensor tt = t;
    for (double& g : tt.grad()) g *= s;
  }
}

void adamw_step(OptimState& state, ParamStore& params) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params.entries()) {
    Tensor tt = t;
    auto& m = state.m[name];
    auto& v = state.v[name];
    const std::size_t n = static_cast<std::size_t>(tt.numel());
    if ((!m.empty() && m.size() != n) || (!v.empty() && v.size() != n)) {
      throw ShapeError("adamw_step: moment shape mismatch for " + name);
    }
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    auto p = tt.values_mut();
    auto g = tt.grad();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps) +
                          state.weight_decay * p[i]);
    }
  }
}

}  // namespace plaindet
