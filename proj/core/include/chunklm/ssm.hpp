#pragma once

#include "chunklm/tape.hpp"
#include "chunklm/tensor.hpp"

namespace chunklm {

// Diagonal continuous-time system per channel: h' = a*h + b*x, y = c*h,
// with a < 0 enforced by the rho parameterization a = -exp(rho).
struct SsmParams {
  Tensor rho;   // [d]
  Tensor b;     // [d]
  Tensor cvec;  // [d]
  double delta = 1.0;
  int taps = 16;

  Tensor a() const;  // -exp(rho), per channel
};

// Zero-order-hold kernel K[j] = cvec * abar^j * bbar for a plain tensor
// parameter set (tests and inspection; the tape op is Tape::ssm_kernel).
Tensor build_kernel(const SsmParams& p);

// On-tape handles for the SSM block parameters inside a model forward.
struct SsmValues {
  Value rho;
  Value b;
  Value cvec;
  Value gate_w;  // [d x d]
  Value gate_b;  // [d]
};

// x + conv(x, K) * sigmoid(x W_g + b_g), strictly causal. Throws ConfigError
// if the kernel is longer than the chunk.
Value ssm_forward(Tape& tape, Value x, const SsmValues& p, double delta, int taps);

// Sequential recurrence h_t = abar*h_{t-1} + bbar*x_t, y_t = cvec*h_t.
// Reference path for the convolution kernel; kept independent of
// ssm_forward's conv route on purpose.
Tensor ssm_scan_oracle(const Tensor& x, const SsmParams& p);

}  // namespace chunklm
