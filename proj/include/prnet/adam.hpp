#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "prnet/tensor.hpp"

namespace prnet {

/// Adam with bias correction and a per-epoch exponential learning-rate decay.
template <typename T>
struct AdamState {
  std::uint64_t step_count = 0;
  std::uint64_t epoch = 0;  // completed epochs, drives the decay
  double learning_rate = 1e-4;
  double decay = 0.995;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  double effective_learning_rate() const { return learning_rate * std::pow(decay, static_cast<double>(epoch)); }

  void end_epoch() { ++epoch; }
};

template <typename T>
void adam_step(std::vector<Tensor<T>*> const& params, AdamState<T>& state) {
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.emplace_back(p->size(), T{0});
      state.second_moment.emplace_back(p->size(), T{0});
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    if (state.first_moment[i].size() != params[i]->size()) {
      throw DimensionError("adam_step: moment size mismatch for parameter " + std::to_string(i));
    }
  }

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double lr = state.effective_learning_rate();
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step = static_cast<T>(lr / c1);
  const T root_c2 = static_cast<T>(std::sqrt(c2));
  const T eps = static_cast<T>(state.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i]->mutable_data();
    auto grad = params[i]->grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const T g = grad[j];
      m[j] = b1 * m[j] + (T{1} - b1) * g;
      v[j] = b2 * v[j] + (T{1} - b2) * g * g;
      value[j] -= step * m[j] / (std::sqrt(v[j]) / root_c2 + eps);
    }
  }
}

}  // namespace prnet
