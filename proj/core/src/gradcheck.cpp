#include "chunklm/gradcheck.hpp"

#include <cmath>

#include "chunklm/rng.hpp"

namespace chunklm {

GradCheckReport grad_check(const std::vector<Tensor*>& params, const LossFn& loss,
                           const GradFn& grads, int probes, double h, std::uint64_t seed) {
  std::vector<Tensor> analytic = grads();
  if (analytic.size() != params.size()) {
    throw ShapeError("grad_check: gradient count does not match parameter count");
  }
  std::int64_t total = 0;
  for (const Tensor* p : params) total += p->size();
  if (total == 0) throw ConfigError("grad_check: no parameters");

  Rng rng(seed);
  GradCheckReport report;
  for (int probe = 0; probe < probes; ++probe) {
    std::int64_t flat = rng.uniform_int(0, total - 1);
    std::size_t pi = 0;
    while (flat >= params[pi]->size()) {
      flat -= params[pi]->size();
      ++pi;
    }
    double* coord = params[pi]->mutable_data() + flat;
    const double saved = *coord;

    *coord = saved + h;
    const double f_plus = loss();
    *coord = saved - h;
    const double f_minus = loss();
    *coord = saved;

    const double numeric = (f_plus - f_minus) / (2.0 * h);
    const double a = analytic[pi][flat];
    const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
    const double rel = std::fabs(a - numeric) / denom;
    if (rel > report.max_rel_error) report.max_rel_error = rel;
    ++report.probes;
  }
  return report;
}

}  // namespace chunklm
