#pragma once

#include <vector>

#include "chunklm/tape.hpp"
#include "chunklm/tensor.hpp"

namespace chunklm {

struct MultiResConfig {
  std::vector<int> dilations{1, 2, 4};  // strictly increasing, all >= 1
  int taps = 3;
};

void validate(const MultiResConfig& cfg);

// 1 + (taps - 1) * max(dilation): span of past positions reaching an output
// through this layer alone.
int receptive_field(const MultiResConfig& cfg);

struct MultiResValues {
  std::vector<Value> kernels;  // per branch, each [taps x d]
  Value mix_w;                 // [d x d], identity at init
};

// mix(x + gelu(sum_k conv(x, kernel_k, dilation_k))); branches summed in
// fixed order, causal throughout. Warns via the returned flag (not an error)
// when the receptive field exceeds the chunk.
Value multires_forward(Tape& tape, Value x, const MultiResValues& p, const MultiResConfig& cfg);

}  // namespace chunklm
