#include "chunklm/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>

namespace chunklm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kTwoPi = 6.283185307179586476925286766559;

double phi_of(double a, double delta) {
  // (exp(a*delta) - 1) / a, with the analytic a -> 0 limit.
  const double x = a * delta;
  if (std::fabs(x) < 1e-4) {
    return delta * (1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0);
  }
  return std::expm1(x) / a;
}

double phi_prime_of(double a, double delta) {
  const double x = a * delta;
  if (std::fabs(x) < 1e-4) {
    return delta * delta * (0.5 + x / 3.0 + x * x / 8.0);
  }
  const double abar = std::exp(x);
  return (delta * abar - phi_of(a, delta)) / a;
}

double gelu_of(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad_of(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(kTwoPi);
  return cdf + x * pdf;
}

}  // namespace

int Tape::push(Node n, const char* opname) {
  check_finite(n.out, opname);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Value Tape::leaf(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.out = std::move(t);
  n.needs_grad = true;
  return Value{push(std::move(n), "leaf")};
}

Value Tape::constant(Tensor t) {
  Node n;
  n.op = Op::kConst;
  n.out = std::move(t);
  n.needs_grad = false;
  return Value{push(std::move(n), "constant")};
}

const Tensor& Tape::val(Value v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw IndexError("bad tape value id");
  return nodes_[static_cast<std::size_t>(v.id)].out;
}

Tensor Tape::grad(Value v) const {
  const Tensor& o = val(v);
  if (static_cast<std::size_t>(v.id) < grads_.size() && grads_[static_cast<std::size_t>(v.id)].defined()) {
    return grads_[static_cast<std::size_t>(v.id)];
  }
  return Tensor(o.shape());
}

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

Value Tape::add(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!same_shape(ta, tb)) {
    throw ShapeError("add: " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  }
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = ta[i] + tb[i];
  Node n;
  n.op = Op::kAdd;
  n.out = std::move(out);
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = needs(a.id) || needs(b.id);
  return Value{push(std::move(n), "add")};
}

Value Tape::sub(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!same_shape(ta, tb)) {
    throw ShapeError("sub: " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  }
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = ta[i] - tb[i];
  Node n;
  n.op = Op::kSub;
  n.out = std::move(out);
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = needs(a.id) || needs(b.id);
  return Value{push(std::move(n), "sub")};
}

Value Tape::mul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!same_shape(ta, tb)) {
    throw ShapeError("mul: " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  }
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = ta[i] * tb[i];
  Node n;
  n.op = Op::kMul;
  n.out = std::move(out);
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = needs(a.id) || needs(b.id);
  return Value{push(std::move(n), "mul")};
}

Value Tape::scale(Value a, double s) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = s * ta[i];
  Node n;
  n.op = Op::kScale;
  n.out = std::move(out);
  n.in0 = a.id;
  n.needs_grad = needs(a.id);
  n.aux_doubles = {s};
  return Value{push(std::move(n), "scale")};
}

Value Tape::matmul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
    throw ShapeError("matmul: " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  }
  const int m = ta.dim(0), k = ta.dim(1), p = tb.dim(1);
  Tensor out({m, p});
  MutMap(out.mutable_data(), m, p).noalias() = ConstMap(ta.data(), m, k) * ConstMap(tb.data(), k, p);
  Node n;
  n.op = Op::kMatmul;
  n.out = std::move(out);
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = needs(a.id) || needs(b.id);
  return Value{push(std::move(n), "matmul")};
}

Value Tape::add_bias(Value x, Value bias) {
  const Tensor& tx = val(x);
  const Tensor& tb = val(bias);
  if (tb.rank() != 1 || tx.rank() < 1 || tx.dim(tx.rank() - 1) != tb.dim(0)) {
    throw ShapeError("add_bias: " + shape_str(tx.shape()) + " + " + shape_str(tb.shape()));
  }
  const std::int64_t d = tb.size();
  Tensor out(tx.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = tx[i] + tb[i % d];
  Node n;
  n.op = Op::kAddBias;
  n.out = std::move(out);
  n.in0 = x.id;
  n.in1 = bias.id;
  n.needs_grad = needs(x.id) || needs(bias.id);
  return Value{push(std::move(n), "add_bias")};
}

Value Tape::add_rows(Value x, Value rows) {
  const Tensor& tx = val(x);
  const Tensor& tr = val(rows);
  if (tx.rank() != 3 || tr.rank() != 2 || tx.dim(0) != tr.dim(0) || tx.dim(2) != tr.dim(1)) {
    throw ShapeError("add_rows: " + shape_str(tx.shape()) + " + " + shape_str(tr.shape()));
  }
  const int B = tx.dim(0), c = tx.dim(1), d = tx.dim(2);
  Tensor out(tx.shape());
  double* o = out.mutable_data();
  const double* px = tx.data();
  const double* pr = tr.data();
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < c; ++t) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * c + t) * d;
      for (int j = 0; j < d; ++j) o[base + j] = px[base + j] + pr[b * d + j];
    }
  }
  Node n;
  n.op = Op::kAddRows;
  n.out = std::move(out);
  n.in0 = x.id;
  n.in1 = rows.id;
  n.needs_grad = needs(x.id) || needs(rows.id);
  return Value{push(std::move(n), "add_rows")};
}

Value Tape::concat_cols(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(0) != tb.dim(0)) {
    throw ShapeError("concat_cols: " + shape_str(ta.shape()) + " | " + shape_str(tb.shape()));
  }
  const int B = ta.dim(0), p = ta.dim(1), q = tb.dim(1);
  Tensor out({B, p + q});
  double* o = out.mutable_data();
  for (int r = 0; r < B; ++r) {
    for (int j = 0; j < p; ++j) o[r * (p + q) + j] = ta[r * p + j];
    for (int j = 0; j < q; ++j) o[r * (p + q) + p + j] = tb[r * q + j];
  }
  Node n;
  n.op = Op::kConcatCols;
  n.out = std::move(out);
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = needs(a.id) || needs(b.id);
  n.aux = p;
  return Value{push(std::move(n), "concat_cols")};
}

Value Tape::reshape(Value a, Shape s) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::kReshape;
  n.out = ta.reshaped(std::move(s));
  n.in0 = a.id;
  n.needs_grad = needs(a.id);
  return Value{push(std::move(n), "reshape")};
}

Value Tape::embedding(Value table, std::vector<int> ids, int rows, int cols) {
  const Tensor& tt = val(table);
  if (tt.rank() != 2) throw ShapeError("embedding: table must be [V x d]");
  if (static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(rows) * cols) {
    throw ShapeError("embedding: ids length mismatch");
  }
  const int V = tt.dim(0), d = tt.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= V) throw IndexError("embedding: token id " + std::to_string(id) + " out of range");
  }
  Tensor out({rows, cols, d});
  double* o = out.mutable_data();
  const double* pt = tt.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = pt + static_cast<std::int64_t>(ids[i]) * d;
    double* dst = o + static_cast<std::int64_t>(i) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  Node n;
  n.op = Op::kEmbedding;
  n.out = std::move(out);
  n.in0 = table.id;
  n.needs_grad = needs(table.id);
  n.aux_ints = std::move(ids);
  return Value{push(std::move(n), "embedding")};
}

Value Tape::causal_conv1d(Value x, Value kernel, int dilation) {
  const Tensor& tx = val(x);
  const Tensor& tk = val(kernel);
  if (dilation < 1) throw ConfigError("causal_conv1d: dilation must be >= 1");
  if (tx.rank() != 3) throw ShapeError("causal_conv1d: input must be [B x c x d]");
  const int B = tx.dim(0), c = tx.dim(1), d = tx.dim(2);
  const bool shared = (tk.rank() == 1);
  if (!shared && (tk.rank() != 2 || tk.dim(1) != d)) {
    throw ShapeError("causal_conv1d: kernel " + shape_str(tk.shape()) + " incompatible with d=" + std::to_string(d));
  }
  const int taps = tk.dim(0);
  if (taps < 1) throw ConfigError("causal_conv1d: taps must be >= 1");
  Tensor out({B, c, d});
  double* o = out.mutable_data();
  const double* px = tx.data();
  const double* pk = tk.data();
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < c; ++t) {
      double* orow = o + (static_cast<std::int64_t>(b) * c + t) * d;
      const int jmax = std::min(taps - 1, t / dilation);
      for (int j = 0; j <= jmax; ++j) {
        const double* xrow = px + (static_cast<std::int64_t>(b) * c + (t - j * dilation)) * d;
        if (shared) {
          const double kj = pk[j];
          for (int ch = 0; ch < d; ++ch) orow[ch] += kj * xrow[ch];
        } else {
          const double* krow = pk + static_cast<std::int64_t>(j) * d;
          for (int ch = 0; ch < d; ++ch) orow[ch] += krow[ch] * xrow[ch];
        }
      }
    }
  }
  Node n;
  n.op = Op::kCausalConv;
  n.out = std::move(out);
  n.in0 = x.id;
  n.in1 = kernel.id;
  n.needs_grad = needs(x.id) || needs(kernel.id);
  n.aux = dilation;
  return Value{push(std::move(n), "causal_conv1d")};
}

Value Tape::mean_pool_tokens(Value x) {
  const Tensor& tx = val(x);
  if (tx.rank() != 3) throw ShapeError("mean_pool_tokens: input must be [B x c x d]");
  const int B = tx.dim(0), c = tx.dim(1), d = tx.dim(2);
  if (c < 1) throw ConfigError("mean_pool_tokens: empty chunk");
  Tensor out({B, d});
  double* o = out.mutable_data();
  const double* px = tx.data();
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < c; ++t) {
      const double* xrow = px + (static_cast<std::int64_t>(b) * c + t) * d;
      for (int j = 0; j < d; ++j) o[b * d + j] += xrow[j];
    }
    for (int j = 0; j < d; ++j) o[b * d + j] /= c;
  }
  Node n;
  n.op = Op::kMeanPool;
  n.out = std::move(out);
  n.in0 = x.id;
  n.needs_grad = needs(x.id);
  return Value{push(std::move(n), "mean_pool_tokens")};
}

Value Tape::softmax(Value x) {
  const Tensor& tx = val(x);
  if (tx.rank() < 1) throw ShapeError("softmax: rank >= 1 required");
  const int V = tx.dim(tx.rank() - 1);
  if (V < 1) throw ShapeError("softmax: empty last dim");
  const std::int64_t slices = tx.size() / V;
  Tensor out(tx.shape());
  double* o = out.mutable_data();
  const double* px = tx.data();
  for (std::int64_t s = 0; s < slices; ++s) {
    const double* in = px + s * V;
    double* op = o + s * V;
    double mx = in[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < V; ++j) {
      op[j] = std::exp(in[j] - mx);
      sum += op[j];
    }
    for (int j = 0; j < V; ++j) op[j] /= sum;
  }
  Node n;
  n.op = Op::kSoftmax;
  n.out = std::move(out);
  n.in0 = x.id;
  n.needs_grad = needs(x.id);
  return Value{push(std::move(n), "softmax")};
}

Value Tape::tanh_op(Value a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = std::tanh(ta[i]);
  Node n;
  n.op = Op::kTanh;
  n.out = std::move(out);
  n.in0 = a.id;
  n.needs_grad = needs(a.id);
  return Value{push(std::move(n), "tanh")};
}

Value Tape::sigmoid_op(Value a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-ta[i]));
  Node n;
  n.op = Op::kSigmoid;
  n.out = std::move(out);
  n.in0 = a.id;
  n.needs_grad = needs(a.id);
  return Value{push(std::move(n), "sigmoid")};
}

Value Tape::gelu_op(Value a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = gelu_of(ta[i]);
  Node n;
  n.op = Op::kGelu;
  n.out = std::move(out);
  n.in0 = a.id;
  n.needs_grad = needs(a.id);
  return Value{push(std::move(n), "gelu")};
}

Value Tape::exp_op(Value a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] = std::exp(ta[i]);
  Node n;
  n.op = Op::kExp;
  n.out = std::move(out);
  n.in0 = a.id;
  n.needs_grad = needs(a.id);
  return Value{push(std::move(n), "exp")};
}

Value Tape::ssm_kernel(Value a, Value b, Value cvec, double delta, int taps) {
  const Tensor& tA = val(a);
  const Tensor& tB = val(b);
  const Tensor& tC = val(cvec);
  if (delta <= 0.0) throw ConfigError("ssm_kernel: delta must be positive");
  if (taps < 1) throw ConfigError("ssm_kernel: taps must be >= 1");
  if (tA.rank() != 1 || !same_shape(tA, tB) || !same_shape(tA, tC)) {
    throw ShapeError("ssm_kernel: a, b, cvec must be matching [d] vectors");
  }
  const int d = tA.dim(0);
  Tensor out({taps, d});
  double* o = out.mutable_data();
  for (int ch = 0; ch < d; ++ch) {
    const double abar = std::exp(tA[ch] * delta);
    const double bbar = phi_of(tA[ch], delta) * tB[ch];
    double pow_abar = 1.0;
    for (int j = 0; j < taps; ++j) {
      o[static_cast<std::int64_t>(j) * d + ch] = tC[ch] * pow_abar * bbar;
      pow_abar *= abar;
    }
  }
  Node n;
  n.op = Op::kSsmKernel;
  n.out = std::move(out);
  n.in0 = a.id;
  n.in1 = b.id;
  n.in2 = cvec.id;
  n.needs_grad = needs(a.id) || needs(b.id) || needs(cvec.id);
  n.aux = taps;
  n.aux_doubles = {delta};
  return Value{push(std::move(n), "ssm_kernel")};
}

Value Tape::masked_ce_row_sums(Value logits, std::vector<int> targets) {
  const Tensor& tl = val(logits);
  if (tl.rank() != 3) throw ShapeError("masked_ce_row_sums: logits must be [B x c x V]");
  const int B = tl.dim(0), c = tl.dim(1), V = tl.dim(2);
  if (static_cast<std::int64_t>(targets.size()) != static_cast<std::int64_t>(B) * c) {
    throw ShapeError("masked_ce_row_sums: targets length mismatch");
  }
  Tensor out({B});
  double* o = out.mutable_data();
  std::vector<double> lse(targets.size(), 0.0);
  const double* pl = tl.data();
  for (int b = 0; b < B; ++b) {
    double sum = 0.0;
    for (int t = 0; t < c; ++t) {
      const int tgt = targets[static_cast<std::size_t>(b) * c + t];
      if (tgt == kIgnoreTarget) continue;
      if (tgt < 0 || tgt >= V) throw IndexError("cross_entropy: target " + std::to_string(tgt) + " out of range");
      const double* row = pl + (static_cast<std::int64_t>(b) * c + t) * V;
      double mx = row[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      double e = 0.0;
      for (int j = 0; j < V; ++j) e += std::exp(row[j] - mx);
      const double l = std::log(e) + mx;
      lse[static_cast<std::size_t>(b) * c + t] = l;
      sum += l - row[tgt];
    }
    o[b] = sum;
  }
  Node n;
  n.op = Op::kMaskedCe;
  n.out = std::move(out);
  n.in0 = logits.id;
  n.needs_grad = needs(logits.id);
  n.aux_ints = std::move(targets);
  n.aux_doubles = std::move(lse);
  return Value{push(std::move(n), "masked_ce_row_sums")};
}

Value Tape::cross_entropy(Value logits, const std::vector<int>& targets) {
  const Tensor& tl = val(logits);
  if (tl.rank() != 2) throw ShapeError("cross_entropy: logits must be [N x V]");
  const int N = tl.dim(0), V = tl.dim(1);
  Value as3d = reshape(logits, {N, 1, V});
  Value sums = masked_ce_row_sums(as3d, targets);
  return weighted_sum(sums, std::vector<double>(static_cast<std::size_t>(N), 1.0 / N));
}

Value Tape::weighted_sum(Value x, std::vector<double> w) {
  const Tensor& tx = val(x);
  if (tx.rank() != 1 || tx.size() != static_cast<std::int64_t>(w.size())) {
    throw ShapeError("weighted_sum: vector/weights length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * tx[static_cast<std::int64_t>(i)];
  Node n;
  n.op = Op::kWeightedSum;
  n.out = Tensor::scalar(s);
  n.in0 = x.id;
  n.needs_grad = needs(x.id);
  n.aux_doubles = std::move(w);
  return Value{push(std::move(n), "weighted_sum")};
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Tape::accumulate(int id, const Tensor& g) {
  if (id < 0) return;
  Tensor& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot.defined()) {
    slot = g;
    return;
  }
  double* p = slot.mutable_data();
  for (std::int64_t i = 0; i < g.size(); ++i) p[i] += g[i];
}

void Tape::backward(Value root) {
  const Tensor& r = val(root);
  if (r.size() != 1) throw ShapeError("backward: root must be scalar");
  grads_.assign(nodes_.size(), Tensor());
  if (!nodes_[static_cast<std::size_t>(root.id)].needs_grad) return;
  grads_[static_cast<std::size_t>(root.id)] = Tensor::scalar(1.0);

  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad) continue;
    const Tensor& g = grads_[static_cast<std::size_t>(i)];
    if (!g.defined()) continue;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kAdd: {
        if (needs(n.in0)) accumulate(n.in0, g);
        if (needs(n.in1)) accumulate(n.in1, g);
        break;
      }
      case Op::kSub: {
        if (needs(n.in0)) accumulate(n.in0, g);
        if (needs(n.in1)) {
          Tensor ng(g.shape());
          double* p = ng.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = -g[j];
          accumulate(n.in1, ng);
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = out(n.in0);
        const Tensor& b = out(n.in1);
        if (needs(n.in0)) {
          Tensor da(g.shape());
          double* p = da.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = g[j] * b[j];
          accumulate(n.in0, da);
        }
        if (needs(n.in1)) {
          Tensor db(g.shape());
          double* p = db.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = g[j] * a[j];
          accumulate(n.in1, db);
        }
        break;
      }
      case Op::kScale: {
        if (needs(n.in0)) {
          const double s = n.aux_doubles[0];
          Tensor da(g.shape());
          double* p = da.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = s * g[j];
          accumulate(n.in0, da);
        }
        break;
      }
      case Op::kMatmul: {
        const Tensor& a = out(n.in0);
        const Tensor& b = out(n.in1);
        const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
        if (needs(n.in0)) {
          Tensor da({m, k});
          MutMap(da.mutable_data(), m, k).noalias() =
              ConstMap(g.data(), m, p) * ConstMap(b.data(), k, p).transpose();
          accumulate(n.in0, da);
        }
        if (needs(n.in1)) {
          Tensor db({k, p});
          MutMap(db.mutable_data(), k, p).noalias() =
              ConstMap(a.data(), m, k).transpose() * ConstMap(g.data(), m, p);
          accumulate(n.in1, db);
        }
        break;
      }
      case Op::kAddBias: {
        if (needs(n.in0)) accumulate(n.in0, g);
        if (needs(n.in1)) {
          const Tensor& bias = out(n.in1);
          const std::int64_t d = bias.size();
          Tensor db(bias.shape());
          double* p = db.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j % d] += g[j];
          accumulate(n.in1, db);
        }
        break;
      }
      case Op::kAddRows: {
        if (needs(n.in0)) accumulate(n.in0, g);
        if (needs(n.in1)) {
          const Tensor& rows = out(n.in1);
          const int B = g.dim(0), c = g.dim(1), d = g.dim(2);
          Tensor dr(rows.shape());
          double* p = dr.mutable_data();
          for (int b = 0; b < B; ++b) {
            for (int t = 0; t < c; ++t) {
              const double* grow = g.data() + (static_cast<std::int64_t>(b) * c + t) * d;
              for (int j = 0; j < d; ++j) p[b * d + j] += grow[j];
            }
          }
          accumulate(n.in1, dr);
        }
        break;
      }
      case Op::kConcatCols: {
        const int p_cols = n.aux;
        const int B = g.dim(0);
        const int total = g.dim(1);
        const int q_cols = total - p_cols;
        if (needs(n.in0)) {
          Tensor da({B, p_cols});
          double* p = da.mutable_data();
          for (int r = 0; r < B; ++r)
            for (int j = 0; j < p_cols; ++j) p[r * p_cols + j] = g[static_cast<std::int64_t>(r) * total + j];
          accumulate(n.in0, da);
        }
        if (needs(n.in1)) {
          Tensor db({B, q_cols});
          double* p = db.mutable_data();
          for (int r = 0; r < B; ++r)
            for (int j = 0; j < q_cols; ++j)
              p[r * q_cols + j] = g[static_cast<std::int64_t>(r) * total + p_cols + j];
          accumulate(n.in1, db);
        }
        break;
      }
      case Op::kReshape: {
        if (needs(n.in0)) accumulate(n.in0, g.reshaped(out(n.in0).shape()));
        break;
      }
      case Op::kEmbedding: {
        if (needs(n.in0)) {
          const Tensor& table = out(n.in0);
          const int d = table.dim(1);
          Tensor dt(table.shape());
          double* p = dt.mutable_data();
          for (std::size_t r = 0; r < n.aux_ints.size(); ++r) {
            const double* grow = g.data() + static_cast<std::int64_t>(r) * d;
            double* dst = p + static_cast<std::int64_t>(n.aux_ints[r]) * d;
            for (int j = 0; j < d; ++j) dst[j] += grow[j];
          }
          accumulate(n.in0, dt);
        }
        break;
      }
      case Op::kCausalConv: {
        const Tensor& x = out(n.in0);
        const Tensor& kern = out(n.in1);
        const int dilation = n.aux;
        const int B = x.dim(0), c = x.dim(1), d = x.dim(2);
        const bool shared = (kern.rank() == 1);
        const int taps = kern.dim(0);
        if (needs(n.in0)) {
          Tensor dx(x.shape());
          double* p = dx.mutable_data();
          for (int b = 0; b < B; ++b) {
            for (int t = 0; t < c; ++t) {
              const double* grow = g.data() + (static_cast<std::int64_t>(b) * c + t) * d;
              const int jmax = std::min(taps - 1, t / dilation);
              for (int j = 0; j <= jmax; ++j) {
                double* xrow = p + (static_cast<std::int64_t>(b) * c + (t - j * dilation)) * d;
                if (shared) {
                  const double kj = kern[j];
                  for (int ch = 0; ch < d; ++ch) xrow[ch] += kj * grow[ch];
                } else {
                  const double* krow = kern.data() + static_cast<std::int64_t>(j) * d;
                  for (int ch = 0; ch < d; ++ch) xrow[ch] += krow[ch] * grow[ch];
                }
              }
            }
          }
          accumulate(n.in0, dx);
        }
        if (needs(n.in1)) {
          Tensor dk(kern.shape());
          double* p = dk.mutable_data();
          for (int b = 0; b < B; ++b) {
            for (int t = 0; t < c; ++t) {
              const double* grow = g.data() + (static_cast<std::int64_t>(b) * c + t) * d;
              const int jmax = std::min(taps - 1, t / dilation);
              for (int j = 0; j <= jmax; ++j) {
                const double* xrow = x.data() + (static_cast<std::int64_t>(b) * c + (t - j * dilation)) * d;
                if (shared) {
                  double s = 0.0;
                  for (int ch = 0; ch < d; ++ch) s += grow[ch] * xrow[ch];
                  p[j] += s;
                } else {
                  double* krow = p + static_cast<std::int64_t>(j) * d;
                  for (int ch = 0; ch < d; ++ch) krow[ch] += grow[ch] * xrow[ch];
                }
              }
            }
          }
          accumulate(n.in1, dk);
        }
        break;
      }
      case Op::kMeanPool: {
        if (needs(n.in0)) {
          const Tensor& x = out(n.in0);
          const int B = x.dim(0), c = x.dim(1), d = x.dim(2);
          Tensor dx(x.shape());
          double* p = dx.mutable_data();
          for (int b = 0; b < B; ++b) {
            const double* grow = g.data() + static_cast<std::int64_t>(b) * d;
            for (int t = 0; t < c; ++t) {
              double* xrow = p + (static_cast<std::int64_t>(b) * c + t) * d;
              for (int j = 0; j < d; ++j) xrow[j] = grow[j] / c;
            }
          }
          accumulate(n.in0, dx);
        }
        break;
      }
      case Op::kSoftmax: {
        if (needs(n.in0)) {
          const Tensor& s = n.out;
          const int V = s.dim(s.rank() - 1);
          const std::int64_t slices = s.size() / V;
          Tensor dx(s.shape());
          double* p = dx.mutable_data();
          for (std::int64_t sl = 0; sl < slices; ++sl) {
            const double* sv = s.data() + sl * V;
            const double* gv = g.data() + sl * V;
            double dot = 0.0;
            for (int j = 0; j < V; ++j) dot += gv[j] * sv[j];
            for (int j = 0; j < V; ++j) p[sl * V + j] = sv[j] * (gv[j] - dot);
          }
          accumulate(n.in0, dx);
        }
        break;
      }
      case Op::kTanh: {
        if (needs(n.in0)) {
          Tensor dx(g.shape());
          double* p = dx.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = g[j] * (1.0 - n.out[j] * n.out[j]);
          accumulate(n.in0, dx);
        }
        break;
      }
      case Op::kSigmoid: {
        if (needs(n.in0)) {
          Tensor dx(g.shape());
          double* p = dx.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = g[j] * n.out[j] * (1.0 - n.out[j]);
          accumulate(n.in0, dx);
        }
        break;
      }
      case Op::kGelu: {
        if (needs(n.in0)) {
          const Tensor& x = out(n.in0);
          Tensor dx(g.shape());
          double* p = dx.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = g[j] * gelu_grad_of(x[j]);
          accumulate(n.in0, dx);
        }
        break;
      }
      case Op::kExp: {
        if (needs(n.in0)) {
          Tensor dx(g.shape());
          double* p = dx.mutable_data();
          for (std::int64_t j = 0; j < g.size(); ++j) p[j] = g[j] * n.out[j];
          accumulate(n.in0, dx);
        }
        break;
      }
      case Op::kSsmKernel: {
        const Tensor& a = out(n.in0);
        const Tensor& b = out(n.in1);
        const Tensor& cvec = out(n.in2);
        const double delta = n.aux_doubles[0];
        const int taps = n.aux;
        const int d = a.dim(0);
        Tensor da(a.shape()), db(b.shape()), dc(cvec.shape());
        double* pa = da.mutable_data();
        double* pb = db.mutable_data();
        double* pc = dc.mutable_data();
        for (int ch = 0; ch < d; ++ch) {
          const double abar = std::exp(a[ch] * delta);
          const double phi = phi_of(a[ch], delta);
          const double dphi = phi_prime_of(a[ch], delta);
          const double bbar = phi * b[ch];
          double s0 = 0.0, s1 = 0.0;
          double pow_abar = 1.0;
          for (int j = 0; j < taps; ++j) {
            const double gj = g[static_cast<std::int64_t>(j) * d + ch];
            s0 += gj * pow_abar;
            s1 += static_cast<double>(j) * gj * pow_abar;
            pow_abar *= abar;
          }
          pc[ch] = s0 * bbar;
          pb[ch] = s0 * cvec[ch] * phi;
          pa[ch] = cvec[ch] * (delta * bbar * s1 + dphi * b[ch] * s0);
        }
        if (needs(n.in0)) accumulate(n.in0, da);
        if (needs(n.in1)) accumulate(n.in1, db);
        if (needs(n.in2)) accumulate(n.in2, dc);
        break;
      }
      case Op::kMaskedCe: {
        if (needs(n.in0)) {
          const Tensor& logits = out(n.in0);
          const int B = logits.dim(0), c = logits.dim(1), V = logits.dim(2);
          Tensor dl(logits.shape());
          double* p = dl.mutable_data();
          for (int b = 0; b < B; ++b) {
            const double grow = g[b];
            for (int t = 0; t < c; ++t) {
              const int tgt = n.aux_ints[static_cast<std::size_t>(b) * c + t];
              if (tgt == kIgnoreTarget) continue;
              const double lse = n.aux_doubles[static_cast<std::size_t>(b) * c + t];
              const double* lrow = logits.data() + (static_cast<std::int64_t>(b) * c + t) * V;
              double* drow = p + (static_cast<std::int64_t>(b) * c + t) * V;
              for (int j = 0; j < V; ++j) drow[j] = grow * std::exp(lrow[j] - lse);
              drow[tgt] -= grow;
            }
          }
          accumulate(n.in0, dl);
        }
        break;
      }
      case Op::kWeightedSum: {
        if (needs(n.in0)) {
          const double gs = g[0];
          Tensor dx({static_cast<int>(n.aux_doubles.size())});
          double* p = dx.mutable_data();
          for (std::size_t j = 0; j < n.aux_doubles.size(); ++j) p[j] = gs * n.aux_doubles[j];
          accumulate(n.in0, dx);
        }
        break;
      }
    }
    // Gradients feed the optimizer and the NaN-abort diagnostics; keep them
    // finite-checked like forward outputs.
    for (int in : {n.in0, n.in1, n.in2}) {
      if (in >= 0 && grads_[static_cast<std::size_t>(in)].defined()) {
        check_finite(grads_[static_cast<std::size_t>(in)], "backward");
      }
    }
  }
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
}

}  // namespace chunklm
