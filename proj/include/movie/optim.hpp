#pragma once

#include <cmath>

#include "movie/common.hpp"
#include "movie/tensor.hpp"

namespace movie {

// Adam moment buffers for one parameter.
template <class S>
struct AdamState {
  std::vector<S> first_moment;
  std::vector<S> second_moment;
  std::size_t step_count = 0;
  S beta1 = S(0.9);
  S beta2 = S(0.98);
  S epsilon = S(1e-8);

  explicit AdamState(std::size_t n = 0, S b1 = S(0.9), S b2 = S(0.98),
                     S eps = S(1e-8))
      : first_moment(n, S(0)), second_moment(n, S(0)), beta1(b1), beta2(b2),
        epsilon(eps) {}
};

// Bias-corrected Adam step, in place.
template <class S>
void adam_update(Tensor<S>& param, const std::vector<S>& grad,
                 AdamState<S>& state, S lr) {
  auto& p = param.data();
  if (grad.size() != p.size() || state.first_moment.size() != p.size())
    throw ShapeError("adam_update: parameter/grad/state size mismatch");
  state.step_count += 1;
  S bc1 = S(1) - S(std::pow(double(state.beta1), double(state.step_count)));
  S bc2 = S(1) - S(std::pow(double(state.beta2), double(state.step_count)));
  for (std::size_t i = 0; i < p.size(); ++i) {
    S g = grad[i];
    state.first_moment[i] = state.beta1 * state.first_moment[i] + (S(1) - state.beta1) * g;
    state.second_moment[i] =
        state.beta2 * state.second_moment[i] + (S(1) - state.beta2) * g * g;
    S mhat = state.first_moment[i] / bc1;
    S vhat = state.second_moment[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

// Linear warmup, constant plateau, single step decay.
struct LrSchedule {
  double base_lr = 1e-4;
  double warmup_start_lr = 2.5e-5;
  std::size_t warmup_epochs = 3;
  std::size_t decay_epoch = 10;   // first epoch at the decayed rate
  double decay_factor = 0.1;
  std::size_t total_epochs = 13;

  void validate() const {
    if (base_lr <= 0 || warmup_start_lr <= 0)
      throw ContractError("lr schedule: rates must be positive");
    if (warmup_start_lr > base_lr)
      throw ContractError("lr schedule: warmup_start_lr exceeds base_lr");
    if (!(warmup_epochs < decay_epoch && decay_epoch <= total_epochs))
      throw ContractError(
          "lr schedule: need warmup_epochs < decay_epoch <= total_epochs");
    if (decay_factor <= 0 || decay_factor >= 1)
      throw ContractError("lr schedule: decay_factor must be in (0,1)");
  }
};

inline double lr_at(std::size_t epoch, const LrSchedule& s) {
  s.validate();
  if (epoch >= s.total_epochs)
    throw ContractError("lr_at: epoch " + std::to_string(epoch) +
                        " >= total_epochs " + std::to_string(s.total_epochs));
  if (epoch < s.warmup_epochs) {
    double t = double(epoch) / double(s.warmup_epochs);
    return s.warmup_start_lr + t * (s.base_lr - s.warmup_start_lr);
  }
  if (epoch >= s.decay_epoch) return s.base_lr * s.decay_factor;
  return s.base_lr;
}

}  // namespace movie
