#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prefnet/tensor.hpp"

namespace prefnet::ad {

struct AdamState {
  double lr = 1e-3;
  double initial_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  AdamState() = default;
  AdamState(const std::vector<Tensor>& params, double learning_rate)
      : lr(learning_rate), initial_lr(learning_rate) {
    for (const auto& p : params) {
      first_moment.emplace_back(p.size(), 0.0);
      second_moment.emplace_back(p.size(), 0.0);
    }
  }
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Clears the grads afterwards.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (params.size() != state.first_moment.size()) {
    throw Error("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) {
      throw Error("adam_step: parameter " + std::to_string(k) + " of shape " +
                  to_string(params[k].shape()) + " has no gradient");
    }
    if (state.first_moment[k].size() != params[k].size()) {
      throw Error("adam_step: moment shape mismatch for parameter " + std::to_string(k));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    auto g = params[k].grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / c1;
      double vhat = v[i] / c2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    params[k].zero_grad();
  }
}

/// Resets moments and step count and restores the initial learning rate.
inline void warm_restart(AdamState& state) {
  for (auto& m : state.first_moment) std::fill(m.begin(), m.end(), 0.0);
  for (auto& v : state.second_moment) std::fill(v.begin(), v.end(), 0.0);
  state.step = 0;
  state.lr = state.initial_lr;
}

}  // namespace prefnet::ad
