#include "chunklm/attention.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "chunklm/rng.hpp"

namespace chunklm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tensor mm(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor out({m, p});
  MutMap(out.mutable_data(), m, p).noalias() = ConstMap(a.data(), m, k) * ConstMap(b.data(), k, p);
  return out;
}

}  // namespace

AttnParams AttnParams::init(int vocab, int d, std::uint64_t seed) {
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  AttnParams p;
  p.embed = rng.gaussian_tensor({vocab, d}, sd);
  p.w_q = rng.gaussian_tensor({d, d}, sd);
  p.w_k = rng.gaussian_tensor({d, d}, sd);
  p.w_v = rng.gaussian_tensor({d, d}, sd);
  p.w_lm = rng.gaussian_tensor({d, vocab}, sd);
  return p;
}

Tensor attn_forward(const std::vector<int>& tokens, int batch, int n, const AttnParams& p,
                    AttnTrace* trace) {
  if (n > kAttnGuardMaxTokens) {
    throw GuardError("attention baseline refuses n=" + std::to_string(n) +
                     ": quadratic " + std::to_string(n) + "x" + std::to_string(n) +
                     " score matrix exceeds the guard (" + std::to_string(kAttnGuardMaxTokens) + ")");
  }
  if (static_cast<std::int64_t>(tokens.size()) != static_cast<std::int64_t>(batch) * n) {
    throw ShapeError("attn_forward: token count mismatch");
  }
  const int V = p.embed.dim(0);
  const int d = p.embed.dim(1);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor logits({batch, n, V});
  double* out = logits.mutable_data();
  for (int b = 0; b < batch; ++b) {
    Tensor q, k, v;
    {
      Tensor e({n, d});
      double* pe = e.mutable_data();
      for (int t = 0; t < n; ++t) {
        const int tok = tokens[static_cast<std::size_t>(b) * n + t];
        if (tok < 0 || tok >= V) throw IndexError("attn_forward: token out of range");
        const double* row = p.embed.data() + static_cast<std::int64_t>(tok) * d;
        for (int j = 0; j < d; ++j) pe[static_cast<std::int64_t>(t) * d + j] = row[j];
      }
      q = mm(e, p.w_q);
      k = mm(e, p.w_k);
      v = mm(e, p.w_v);
    }
    // Scores and attention weights are the deliberate n x n allocations.
    Tensor attn;
    {
      Tensor scores({n, n});
      MutMap(scores.mutable_data(), n, n).noalias() =
          ConstMap(q.data(), n, d) * ConstMap(k.data(), n, d).transpose() * inv_sqrt_d;
      q = Tensor();
      k = Tensor();
      attn = Tensor({n, n});
      double* ps = scores.mutable_data();
      double* pa = attn.mutable_data();
      for (int t = 0; t < n; ++t) {
        double* srow = ps + static_cast<std::int64_t>(t) * n;
        double* arow = pa + static_cast<std::int64_t>(t) * n;
        double mx = srow[0];
        for (int j = 1; j <= t; ++j) mx = std::max(mx, srow[j]);
        double sum = 0.0;
        for (int j = 0; j <= t; ++j) {
          arow[j] = std::exp(srow[j] - mx);
          sum += arow[j];
        }
        for (int j = 0; j <= t; ++j) arow[j] /= sum;
        for (int j = t + 1; j < n; ++j) arow[j] = 0.0;  // masked: exactly zero
      }
    }
    check_finite(attn, "attn_softmax");
    if (trace && b == 0) trace->weights = attn;
    Tensor ctx({n, d});
    MutMap(ctx.mutable_data(), n, d).noalias() =
        ConstMap(attn.data(), n, n) * ConstMap(v.data(), n, d);
    attn = Tensor();
    v = Tensor();
    MutMap(out + static_cast<std::int64_t>(b) * n * V, n, V).noalias() =
        ConstMap(ctx.data(), n, d) * ConstMap(p.w_lm.data(), d, V);
  }
  check_finite(logits, "attn_forward");
  return logits;
}

}  // namespace chunklm
