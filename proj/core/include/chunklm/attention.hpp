#pragma once

#include <cstdint>
#include <optional>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Single-layer, single-head causal softmax attention LM. Exists only as the
// quadratic contrast in the scaling benchmark; it is never trained, so the
// forward pass is plain tensor math (intermediates free as they go out of
// scope, which keeps the peak-float measurement honest).
struct AttnParams {
  Tensor embed;              // [V x d]
  Tensor w_q, w_k, w_v;      // [d x d]
  Tensor w_lm;               // [d x V]

  static AttnParams init(int vocab, int d, std::uint64_t seed);
};

// Refuse to allocate the n x n score matrix beyond this length.
constexpr int kAttnGuardMaxTokens = 16384;

struct AttnTrace {
  Tensor weights;  // [n x n] post-softmax attention (B=1 slice), test use
};

// Causal masked scaled dot-product attention over the whole sequence, then
// the LM head. The n x n score matrix is deliberately materialized. Throws
// GuardError when n exceeds kAttnGuardMaxTokens.
Tensor attn_forward(const std::vector<int>& tokens, int batch, int n, const AttnParams& p,
                    AttnTrace* trace = nullptr);

}  // namespace chunklm
