#pragma once

#include <vector>

#include "chunklm/tensor.hpp"

namespace chunklm {

// First/second moment buffers for one parameter tensor.
struct AdamMoments {
  Tensor m;
  Tensor v;
};

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.01;
};

// One AdamW update, decoupled weight decay applied before the Adam delta:
//   param *= (1 - lr*wd)
//   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
//   param -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
// step is 1-based.
void adamw_step(Tensor& param, const Tensor& grad, AdamMoments& moments, int step,
                const AdamWConfig& cfg);

void adamw_step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                std::vector<AdamMoments>& moments, int step, const AdamWConfig& cfg);

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace chunklm
