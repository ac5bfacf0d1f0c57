#include "chunklm/optim.hpp"

#include <cmath>

namespace chunklm {

void adamw_step(Tensor& param, const Tensor& grad, AdamMoments& moments, int step,
                const AdamWConfig& cfg) {
  if (cfg.lr <= 0.0) throw ConfigError("adamw_step: learning rate must be positive");
  if (step < 1) throw ConfigError("adamw_step: step must be >= 1");
  if (!same_shape(param, grad)) throw ShapeError("adamw_step: param/grad shape mismatch");
  if (!moments.m.defined()) moments.m = Tensor(param.shape());
  if (!moments.v.defined()) moments.v = Tensor(param.shape());
  if (!same_shape(param, moments.m) || !same_shape(param, moments.v)) {
    throw ShapeError("adamw_step: param/moment shape mismatch");
  }

  const double bc1 = 1.0 - std::pow(cfg.beta1, step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step);
  double* p = param.mutable_data();
  double* m = moments.m.mutable_data();
  double* v = moments.v.mutable_data();
  for (std::int64_t i = 0; i < param.size(); ++i) {
    p[i] *= (1.0 - cfg.lr * cfg.weight_decay);
    const double g = grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  check_finite(param, "adamw_step");
}

void adamw_step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                std::vector<AdamMoments>& moments, int step, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adamw_step: param/grad count mismatch");
  if (moments.size() != params.size()) moments.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    adamw_step(*params[i], grads[i], moments[i], step, cfg);
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (std::int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      double* p = g.mutable_data();
      for (std::int64_t i = 0; i < g.size(); ++i) p[i] *= s;
    }
  }
  return norm;
}

}  // namespace chunklm
