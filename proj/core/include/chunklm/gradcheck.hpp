#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Evaluates the loss at the current parameter values.
using LossFn = std::function<double()>;
// Evaluates loss + analytic gradients (one tensor per parameter, same order).
using GradFn = std::function<std::vector<Tensor>()>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  int probes = 0;
};

// Compares reverse-mode gradients against central differences on randomly
// probed coordinates. Relative error per probe is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport grad_check(const std::vector<Tensor*>& params, const LossFn& loss,
                           const GradFn& grads, int probes, double h, std::uint64_t seed);

}  // namespace chunklm
