#pragma once

#include <cmath>
#include <map>
#include <string>

#include "emae/errors.hpp"
#include "emae/model.hpp"
#include "emae/tensor.hpp"

namespace emae {

/// Step decay: base * factor^floor(epoch / step_size).
inline double lr_at_epoch(double base, std::size_t step_size, double factor, std::size_t epoch) {
  if (step_size == 0) throw ContractError("lr step size must be >= 1");
  return base * std::pow(factor, static_cast<double>(epoch / step_size));
}

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without a gradient entry are left untouched.
inline void adam_step(ParameterMap& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ContractError("gradient shape " + shape_str(g.shape()) + " does not match parameter '" + name + "' " +
                          shape_str(it->second.shape()));
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, Tensor(g.shape()));
    auto [vit, v_new] = state.v.try_emplace(name, Tensor(g.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

}  // namespace emae
