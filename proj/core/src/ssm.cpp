#include "chunklm/ssm.hpp"

#include <cmath>

namespace chunklm {

Tensor SsmParams::a() const {
  Tensor out(rho.shape());
  double* p = out.mutable_data();
  for (std::int64_t i = 0; i < rho.size(); ++i) p[i] = -std::exp(rho[i]);
  return out;
}

Tensor build_kernel(const SsmParams& p) {
  Tape tape;
  Value a = tape.constant(p.a());
  Value b = tape.constant(p.b);
  Value c = tape.constant(p.cvec);
  return tape.val(tape.ssm_kernel(a, b, c, p.delta, p.taps));
}

Value ssm_forward(Tape& tape, Value x, const SsmValues& p, double delta, int taps) {
  const Tensor& tx = tape.val(x);
  if (tx.rank() != 3) throw ShapeError("ssm_forward: input must be [B x c x d]");
  const int B = tx.dim(0), c = tx.dim(1), d = tx.dim(2);
  if (taps > c) {
    throw ConfigError("ssm_forward: kernel taps " + std::to_string(taps) +
                      " exceed chunk length " + std::to_string(c));
  }
  // a = -exp(rho): negativity (hence kernel stability) holds by construction.
  Value a = tape.scale(tape.exp_op(p.rho), -1.0);
  Value kernel = tape.ssm_kernel(a, p.b, p.cvec, delta, taps);
  Value conv = tape.causal_conv1d(x, kernel, 1);
  Value flat = tape.reshape(x, {B * c, d});
  Value gate_pre = tape.add_bias(tape.matmul(flat, p.gate_w), p.gate_b);
  Value gate = tape.reshape(tape.sigmoid_op(gate_pre), {B, c, d});
  return tape.add(x, tape.mul(conv, gate));
}

Tensor ssm_scan_oracle(const Tensor& x, const SsmParams& p) {
  if (x.rank() != 3) throw ShapeError("ssm_scan_oracle: input must be [B x c x d]");
  const int B = x.dim(0), c = x.dim(1), d = x.dim(2);
  const Tensor a = p.a();
  Tensor y(x.shape());
  double* py = y.mutable_data();
  for (int bi = 0; bi < B; ++bi) {
    for (int ch = 0; ch < d; ++ch) {
      const double abar = std::exp(a[ch] * p.delta);
      double bbar;
      const double ad = a[ch] * p.delta;
      if (std::fabs(ad) < 1e-4) {
        bbar = p.delta * (1.0 + ad / 2.0 + ad * ad / 6.0 + ad * ad * ad / 24.0) * p.b[ch];
      } else {
        bbar = std::expm1(ad) / a[ch] * p.b[ch];
      }
      double h = 0.0;
      for (int t = 0; t < c; ++t) {
        const std::int64_t idx = (static_cast<std::int64_t>(bi) * c + t) * d + ch;
        h = abar * h + bbar * x[idx];
        py[idx] = p.cvec[ch] * h;
      }
    }
  }
  check_finite(y, "ssm_scan_oracle");
  return y;
}

}  // namespace chunklm
