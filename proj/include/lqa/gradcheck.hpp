#pragma once

// Central finite-difference audit of tape gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lqa/autodiff.hpp"

namespace lqa::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
};

/// Relative error |a - f| / max(|a|, |f|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-3);

/// Builds the loss on a fresh tape, backpropagates, then compares up to
/// n_coords randomly chosen parameter coordinates against central
/// differences with step h. Only trainable parameters are probed.
GradCheckResult check_gradients(ParamStore& params, const std::function<Var(Tape&)>& loss,
                                std::uint64_t seed, std::size_t n_coords = 100, double h = 1e-5);

}  // namespace lqa::ad
