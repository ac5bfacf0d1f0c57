#pragma once

#include "chunklm/tape.hpp"
#include "chunklm/tensor.hpp"

namespace chunklm {

// Single GRU cell. Update convention (normative for all tests):
//   z = sigmoid(x W_z + h U_z + b_z)
//   r = sigmoid(x W_r + h U_r + b_r)
//   htilde = tanh(x W_h + (r .* h) U_h + b_h)
//   h' = (1 - z) .* h + z .* htilde
struct GruValues {
  Value w_z, w_r, w_h;  // [d_in x d_h]
  Value u_z, u_r, u_h;  // [d_h x d_h]
  Value b_z, b_r, b_h;  // [d_h]
};

Value gru_cell(Tape& tape, Value x, Value h, const GruValues& p);

// Zero initial state [B x d_h].
Tensor gru_init_state(int batch, int d_h);

}  // namespace chunklm
