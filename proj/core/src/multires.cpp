#include "chunklm/multires.hpp"

#include <algorithm>

namespace chunklm {

void validate(const MultiResConfig& cfg) {
  if (cfg.dilations.empty()) throw ConfigError("multires: empty branch list");
  if (cfg.taps < 1) throw ConfigError("multires: taps must be >= 1");
  int prev = 0;
  for (int d : cfg.dilations) {
    if (d < 1) throw ConfigError("multires: dilation must be >= 1");
    if (d <= prev) throw ConfigError("multires: dilations must be strictly increasing");
    prev = d;
  }
}

int receptive_field(const MultiResConfig& cfg) {
  validate(cfg);
  const int dmax = *std::max_element(cfg.dilations.begin(), cfg.dilations.end());
  return 1 + (cfg.taps - 1) * dmax;
}

Value multires_forward(Tape& tape, Value x, const MultiResValues& p, const MultiResConfig& cfg) {
  validate(cfg);
  if (p.kernels.size() != cfg.dilations.size()) {
    throw ConfigError("multires: kernel count does not match dilation count");
  }
  const Tensor& tx = tape.val(x);
  if (tx.rank() != 3) throw ShapeError("multires_forward: input must be [B x c x d]");
  const int B = tx.dim(0), c = tx.dim(1), d = tx.dim(2);

  Value sum;
  for (std::size_t k = 0; k < p.kernels.size(); ++k) {
    Value branch = tape.causal_conv1d(x, p.kernels[k], cfg.dilations[k]);
    sum = (k == 0) ? branch : tape.add(sum, branch);
  }
  Value res = tape.add(x, tape.gelu_op(sum));
  Value flat = tape.reshape(res, {B * c, d});
  return tape.reshape(tape.matmul(flat, p.mix_w), {B, c, d});
}

}  // namespace chunklm
