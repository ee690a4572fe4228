#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "equivar/tensor.hpp"

namespace equivar {

enum class Schedule { constant, cosine, step };

/// Learning rate at `step` of `total_steps`. The step schedule multiplies by
/// 0.1 at 60% and 80% of training.
inline double scheduled_lr(double base, Schedule schedule, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  switch (schedule) {
    case Schedule::constant:
      return base;
    case Schedule::cosine:
      return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
    case Schedule::step:
      return base * (t >= 0.8 ? 0.01 : t >= 0.6 ? 0.1 : 1.0);
  }
  return base;
}

/// Momentum SGD with L2 weight decay (PyTorch convention: decay is added to
/// the gradient before the momentum buffer).
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.size(), T(0));
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto values = p.mutable_values();
      const auto grad = p.grad();
      auto& vel = velocity_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const T g = (grad.empty() ? T(0) : grad[j]) + static_cast<T>(weight_decay_) * values[j];
        vel[j] = static_cast<T>(momentum_) * vel[j] + g;
        values[j] -= static_cast<T>(lr) * vel[j];
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor<T>>& parameters() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

/// Collects parameter handles from modules exposing parameter_slots().
template <typename T, typename... Modules>
std::vector<Tensor<T>> collect_parameters(Modules&... modules) {
  std::vector<Tensor<T>> out;
  (
      [&] {
        for (auto* slot : modules.parameter_slots()) out.push_back(*slot);
      }(),
      ...);
  return out;
}

}  // namespace equivar
