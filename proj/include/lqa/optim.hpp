#pragma once

// Riemannian Adam over a mix of euclidean and hyperboloid parameters, plus
// the warmup + cosine learning-rate schedule.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lqa/autodiff.hpp"

namespace lqa::optim {

using ad::Parameter;
using ad::Vec;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled decay; applied to euclidean parameters only.
  double weight_decay = 0.0;
};

struct AdamState {
  std::uint64_t step = 0;
  Vec m;
  Vec v;
};

enum class Decay { cosine };

struct Schedule {
  double base_lr = 1e-3;
  double warmup_frac = 0.1;
  std::size_t total_steps = 1;
  Decay decay = Decay::cosine;
};

/// Linear warmup from 0 to base_lr, then base_lr * 0.5 * (1 + cos(pi * progress)).
double lr_at(const Schedule& schedule, std::size_t step_index);

/// Flips the time coordinate of the euclidean gradient and projects each row
/// onto the tangent space at the corresponding point.
Vec riemannian_grad(const Parameter& p);

class RiemannianAdam {
 public:
  RiemannianAdam(std::vector<Parameter*> params, AdamConfig config);

  /// One update with lr = lr_at(schedule, step_index). Gradients are
  /// clipped to a global L2 norm of clip_norm (<= 0 disables). Returns the
  /// pre-clip norm. Throws TrainingError on non-finite gradients/updates.
  double step(const Schedule& schedule, std::size_t step_index, double clip_norm);
  double step_with_lr(double lr, double clip_norm);

  void zero_grad();
  const std::vector<Parameter*>& params() const { return params_; }
  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<AdamState> states_;
  AdamConfig config_;
};

}  // namespace lqa::optim
