#pragma once

#include <cstdint>
#include <vector>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Handle to a node on a Tape.
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over the closed op set the model needs.
// Nodes are appended in topological order (an op's inputs always have
// smaller ids), so backward() is a single reverse sweep visiting each node
// exactly once. Tensors attached to nodes are immutable; a cleared tape
// releases everything it recorded.
//
// Every op validates shapes and checks its output for NaN/Inf, throwing
// NumericError naming the op rather than propagating silently.
class Tape {
 public:
  static constexpr int kIgnoreTarget = 65535;

  // Leaf participating in gradients (parameters, differentiable inputs).
  Value leaf(Tensor t);
  // Leaf excluded from gradients (detached state, retrieved memory values).
  Value constant(Tensor t);

  const Tensor& val(Value v) const;
  // Gradient of the last backward() root w.r.t. node v (zeros if unreached).
  Tensor grad(Value v) const;

  // -- arithmetic -----------------------------------------------------------
  Value add(Value a, Value b);       // same shape
  Value sub(Value a, Value b);       // same shape
  Value mul(Value a, Value b);       // elementwise, same shape
  Value scale(Value a, double s);
  Value matmul(Value a, Value b);    // [m x k] . [k x p]
  Value add_bias(Value x, Value bias);   // x [... x d] + bias [d]
  Value add_rows(Value x, Value rows);   // x [B x c x d] + rows [B x d]
  Value concat_cols(Value a, Value b);   // [B x p], [B x q] -> [B x (p+q)]
  Value reshape(Value a, Shape s);

  // -- neural ops -----------------------------------------------------------
  Value embedding(Value table, std::vector<int> ids, int rows, int cols);
  // Depthwise causal convolution. kernel is [taps x d] (per channel) or
  // [taps] (shared across channels); left-padding of (taps-1)*dilation zeros.
  Value causal_conv1d(Value x, Value kernel, int dilation);
  Value mean_pool_tokens(Value x);   // [B x c x d] -> [B x d]
  Value softmax(Value x);            // over the last dim, max-subtracted
  Value tanh_op(Value a);
  Value sigmoid_op(Value a);
  Value gelu_op(Value a);            // exact erf definition
  Value exp_op(Value a);

  // Zero-order-hold SSM kernel. a, b, cvec are per-channel [d];
  // K[j] = cvec * abar^j * bbar with abar = exp(a*delta),
  // bbar = (abar - 1)/a * b (analytic limit delta*b as a -> 0).
  Value ssm_kernel(Value a, Value b, Value cvec, double delta, int taps);

  // Per-row sums of token cross-entropy. logits [B x c x V], targets length
  // B*c with kIgnoreTarget masking a position out. Returns [B].
  Value masked_ce_row_sums(Value logits, std::vector<int> targets);
  // Mean cross-entropy over N rows: logits [N x V], targets length N.
  Value cross_entropy(Value logits, const std::vector<int>& targets);
  // Scalar dot of a vector node with fixed weights.
  Value weighted_sum(Value x, std::vector<double> w);

  void backward(Value root);  // root must be a scalar (size 1)
  void clear();
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    kLeaf, kConst, kAdd, kSub, kMul, kScale, kMatmul, kAddBias, kAddRows,
    kConcatCols, kReshape, kEmbedding, kCausalConv, kMeanPool, kSoftmax,
    kTanh, kSigmoid, kGelu, kExp, kSsmKernel, kMaskedCe, kWeightedSum,
  };

  struct Node {
    Op op;
    Tensor out;
    int in0 = -1, in1 = -1, in2 = -1;
    bool needs_grad = false;
    int aux = 0;                     // dilation / rows / etc.
    std::vector<int> aux_ints;       // ids, targets
    std::vector<double> aux_doubles; // weights, delta
  };

  int push(Node n, const char* opname);
  const Tensor& out(int id) const { return nodes_[static_cast<std::size_t>(id)].out; }
  bool needs(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; }
  void accumulate(int id, const Tensor& g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace chunklm
