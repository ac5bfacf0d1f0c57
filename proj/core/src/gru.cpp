#include "chunklm/gru.hpp"

namespace chunklm {

Value gru_cell(Tape& tape, Value x, Value h, const GruValues& p) {
  const Tensor& tx = tape.val(x);
  const Tensor& th = tape.val(h);
  if (tx.rank() != 2 || th.rank() != 2 || tx.dim(0) != th.dim(0)) {
    throw ShapeError("gru_cell: x " + shape_str(tx.shape()) + " vs h " + shape_str(th.shape()));
  }
  Value z = tape.sigmoid_op(
      tape.add_bias(tape.add(tape.matmul(x, p.w_z), tape.matmul(h, p.u_z)), p.b_z));
  Value r = tape.sigmoid_op(
      tape.add_bias(tape.add(tape.matmul(x, p.w_r), tape.matmul(h, p.u_r)), p.b_r));
  Value htilde = tape.tanh_op(
      tape.add_bias(tape.add(tape.matmul(x, p.w_h), tape.matmul(tape.mul(r, h), p.u_h)), p.b_h));
  // h' = (1 - z) .* h + z .* htilde = h - z .* h + z .* htilde
  return tape.add(tape.sub(h, tape.mul(z, h)), tape.mul(z, htilde));
}

Tensor gru_init_state(int batch, int d_h) { return Tensor({batch, d_h}); }

}  // namespace chunklm
