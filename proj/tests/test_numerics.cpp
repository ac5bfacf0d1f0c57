#include <doctest.h>

#include <cmath>
#include <vector>

#include "chunklm/gradcheck.hpp"
#include "chunklm/optim.hpp"
#include "chunklm/rng.hpp"
#include "chunklm/tape.hpp"

using namespace chunklm;

namespace {

// Independent log-sum-exp cross-entropy oracle (no tape code paths).
double ce_oracle(const std::vector<double>& logits, const std::vector<int>& targets, int V) {
  const int N = static_cast<int>(targets.size());
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    double mx = logits[static_cast<std::size_t>(i) * V];
    for (int j = 1; j < V; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(i) * V + j]);
    double sum = 0.0;
    for (int j = 0; j < V; ++j) sum += std::exp(logits[static_cast<std::size_t>(i) * V + j] - mx);
    total += std::log(sum) + mx - logits[static_cast<std::size_t>(i) * V + targets[static_cast<std::size_t>(i)]];
  }
  return total / N;
}

// Direct O(c * taps) convolution oracle.
std::vector<double> conv_oracle(const std::vector<double>& x, int c, int d,
                                const std::vector<double>& kernel, int taps, int dilation) {
  std::vector<double> out(static_cast<std::size_t>(c) * d, 0.0);
  for (int t = 0; t < c; ++t) {
    for (int j = 0; j < taps; ++j) {
      const int src = t - j * dilation;
      if (src < 0) continue;
      for (int ch = 0; ch < d; ++ch) {
        out[static_cast<std::size_t>(t) * d + ch] +=
            kernel[static_cast<std::size_t>(j) * d + ch] * x[static_cast<std::size_t>(src) * d + ch];
      }
    }
  }
  return out;
}

double tape_loss_sum_squares(Tensor& param) {
  Tape tape;
  Value x = tape.leaf(param);
  Value sq = tape.mul(x, x);
  const std::int64_t n = param.size();
  Value flat = tape.reshape(sq, {static_cast<int>(n)});
  return tape.val(tape.weighted_sum(flat, std::vector<double>(static_cast<std::size_t>(n), 1.0))).item();
}

}  // namespace

TEST_CASE("matmul basics") {
  Tape tape;
  Value id2 = tape.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Value v = tape.leaf(Tensor({2, 1}, {5, 6}));
  CHECK(max_abs_diff(tape.val(tape.matmul(id2, v)), Tensor({2, 1}, {5, 6})) == 0.0);

  Value z = tape.leaf(Tensor({2, 3}));
  Value any = tape.leaf(Tensor({3, 4}, std::vector<double>(12, 3.25)));
  CHECK(max_abs_diff(tape.val(tape.matmul(z, any)), Tensor({2, 4})) == 0.0);

  Value a = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(max_abs_diff(tape.val(tape.matmul(a, v)), Tensor({2, 1}, {17, 39})) == 0.0);

  CHECK_THROWS_AS(tape.matmul(a, tape.leaf(Tensor({3, 1}, {1, 2, 3}))), ShapeError);
}

TEST_CASE("matmul associativity on random triples") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tape tape;
    Value a = tape.leaf(rng.gaussian_tensor({3, 4}, 1.0));
    Value b = tape.leaf(rng.gaussian_tensor({4, 5}, 1.0));
    Value c = tape.leaf(rng.gaussian_tensor({5, 2}, 1.0));
    const Tensor left = tape.val(tape.matmul(tape.matmul(a, b), c));
    const Tensor right = tape.val(tape.matmul(a, tape.matmul(b, c)));
    CHECK(max_abs_diff(left, right) < 1e-10);
  }
}

TEST_CASE("matmul gradient contract dA = g B^T, dB = A^T g") {
  Rng rng(12);
  Tensor ta = rng.gaussian_tensor({3, 4}, 1.0);
  Tensor tb = rng.gaussian_tensor({4, 2}, 1.0);
  Tape tape;
  Value a = tape.leaf(ta);
  Value b = tape.leaf(tb);
  Value prod = tape.matmul(a, b);
  Value loss = tape.weighted_sum(tape.reshape(prod, {6}), std::vector<double>(6, 1.0));
  tape.backward(loss);
  // dOut is all-ones, so dA row i = sum over columns of B rows.
  Tensor da = tape.grad(a);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (int j = 0; j < 2; ++j) expect += tb[k * 2 + j];
      CHECK(da[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("causal_conv1d identity and shift kernels") {
  Rng rng(13);
  Tensor x = rng.gaussian_tensor({1, 6, 3}, 1.0);
  Tape tape;
  Value xv = tape.leaf(x);

  Value one_tap = tape.leaf(Tensor({1}, {1.0}));
  CHECK(max_abs_diff(tape.val(tape.causal_conv1d(xv, one_tap, 1)), x) == 0.0);

  Value shift = tape.leaf(Tensor({2}, {0.0, 1.0}));
  const Tensor shifted = tape.val(tape.causal_conv1d(xv, shift, 1));
  for (int ch = 0; ch < 3; ++ch) CHECK(shifted[ch] == 0.0);
  for (int t = 1; t < 6; ++t) {
    for (int ch = 0; ch < 3; ++ch) {
      CHECK(shifted[t * 3 + ch] == x[(t - 1) * 3 + ch]);
    }
  }
  CHECK_THROWS_AS(tape.causal_conv1d(xv, one_tap, 0), ConfigError);
}

TEST_CASE("causal_conv1d impulse with dilation matches direct oracle") {
  const int c = 8, d = 1;
  Tensor x({1, c, d});
  x.mutable_data()[0] = 1.0;  // unit impulse at t = 0
  const std::vector<double> kern = {0.7, -0.3, 0.11};
  Tape tape;
  Value out = tape.causal_conv1d(tape.leaf(x), tape.leaf(Tensor({3, 1}, kern)), 2);
  const std::vector<double> expect =
      conv_oracle(std::vector<double>(x.data(), x.data() + c), c, d, kern, 3, 2);
  const Tensor& got = tape.val(out);
  for (int t = 0; t < c; ++t) CHECK(got[t] == doctest::Approx(expect[static_cast<std::size_t>(t)]));
  // nonzero exactly at t in {0, 2, 4}
  for (int t = 0; t < c; ++t) {
    const bool nz = (t == 0 || t == 2 || t == 4);
    CHECK((got[t] != 0.0) == nz);
  }
}

TEST_CASE("causal_conv1d strict causality is bitwise") {
  Rng rng(14);
  Tensor base = rng.gaussian_tensor({2, 10, 4}, 1.0);
  Tensor kernel = rng.gaussian_tensor({3, 4}, 1.0);
  for (int t : {3, 7}) {
    Tensor bumped = base;
    bumped.mutable_data()[(0 * 10 + t) * 4 + 1] += 2.5;
    Tape tape;
    const Tensor a = tape.val(tape.causal_conv1d(tape.leaf(base), tape.leaf(kernel), 2));
    const Tensor b = tape.val(tape.causal_conv1d(tape.leaf(bumped), tape.leaf(kernel), 2));
    for (int tt = 0; tt < t; ++tt) {
      for (int ch = 0; ch < 4; ++ch) {
        CHECK(a[(0 * 10 + tt) * 4 + ch] == b[(0 * 10 + tt) * 4 + ch]);
      }
    }
  }
}

TEST_CASE("mean_pool_tokens") {
  Tape tape;
  // constant rows pool to themselves
  Tensor constant({1, 3, 2}, {4, -1, 4, -1, 4, -1});
  CHECK(max_abs_diff(tape.val(tape.mean_pool_tokens(tape.leaf(constant))), Tensor({1, 2}, {4, -1})) == 0.0);
  // singleton chunk
  Tensor single({1, 1, 2}, {7, 9});
  CHECK(max_abs_diff(tape.val(tape.mean_pool_tokens(tape.leaf(single))), Tensor({1, 2}, {7, 9})) == 0.0);
  // hand average
  Tensor two({1, 2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(tape.val(tape.mean_pool_tokens(tape.leaf(two))), Tensor({1, 2}, {0.5, 0.5})) == 0.0);
  CHECK_THROWS_AS(tape.mean_pool_tokens(tape.leaf(Tensor({1, 0, 2}))), ConfigError);
}

TEST_CASE("softmax examples and properties") {
  Tape tape;
  Value flat = tape.leaf(Tensor({4}, {2.0, 2.0, 2.0, 2.0}));
  const Tensor uniform = tape.val(tape.softmax(flat));
  for (int j = 0; j < 4; ++j) CHECK(uniform[j] == doctest::Approx(0.25).epsilon(1e-12));

  Value pair = tape.leaf(Tensor({2}, {0.0, std::log(3.0)}));
  const Tensor s = tape.val(tape.softmax(pair));
  CHECK(s[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = rng.gaussian_tensor({3, 7}, 3.0);
    Tensor shiftedt = logits;
    const double shift = rng.uniform(-50.0, 50.0);
    double* p = shiftedt.mutable_data();
    for (std::int64_t i = 0; i < shiftedt.size(); ++i) p[i] += shift;
    Tape t2;
    const Tensor a = t2.val(t2.softmax(t2.leaf(logits)));
    const Tensor b = t2.val(t2.softmax(t2.leaf(shiftedt)));
    CHECK(max_abs_diff(a, b) < 1e-12);  // shift invariance
    for (int row = 0; row < 3; ++row) {
      double sum = 0.0;
      for (int j = 0; j < 7; ++j) sum += a[row * 7 + j];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("cross_entropy analytic and oracle values") {
  const int V = 256;
  Tape tape;
  Value logits = tape.leaf(Tensor({1, V}));
  CHECK(tape.val(tape.cross_entropy(logits, {7})).item() ==
        doctest::Approx(std::log(256.0)).epsilon(1e-12));

  // +30 margin on the correct class drives the loss under 1e-9
  Tensor margin({1, V});
  margin.mutable_data()[42] = 30.0;
  CHECK(tape.val(tape.cross_entropy(tape.leaf(margin), {42})).item() < 1e-9);

  Rng rng(16);
  std::vector<double> raw(15);
  for (auto& v : raw) v = rng.gaussian() * 2.0;
  std::vector<int> targets = {4, 0, 2};
  Tape t2;
  const double got = t2.val(t2.cross_entropy(t2.leaf(Tensor({3, 5}, raw)), targets)).item();
  CHECK(got == doctest::Approx(ce_oracle(raw, targets, 5)).epsilon(1e-12));

  CHECK_THROWS_AS(t2.cross_entropy(t2.leaf(Tensor({1, 5})), {9}), IndexError);
}

TEST_CASE("cross_entropy gradient is softmax minus onehot over N") {
  Rng rng(17);
  std::vector<double> raw(12);
  for (auto& v : raw) v = rng.gaussian();
  std::vector<int> targets = {1, 3, 0};
  Tape tape;
  Value logits = tape.leaf(Tensor({3, 4}, raw));
  Value loss = tape.cross_entropy(logits, targets);
  tape.backward(loss);
  const Tensor g = tape.grad(logits);
  Tape t2;
  const Tensor probs = t2.val(t2.softmax(t2.leaf(Tensor({3, 4}, raw))));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      const double expect = (probs[i * 4 + j] - (j == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0)) / 3.0;
      CHECK(g[i * 4 + j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("elementwise activations") {
  Tape tape;
  Value x = tape.leaf(Tensor({3}, {0.0, 1.0, -1.0}));
  const Tensor th = tape.val(tape.tanh_op(x));
  CHECK(th[0] == 0.0);
  CHECK(th[1] == doctest::Approx(std::tanh(1.0)).epsilon(1e-15));
  CHECK(th[2] == doctest::Approx(-std::tanh(1.0)).epsilon(1e-15));  // odd symmetry

  const Tensor sg = tape.val(tape.sigmoid_op(x));
  CHECK(sg[0] == 0.5);

  const Tensor ge = tape.val(tape.gelu_op(x));
  const double gelu1 = 0.5 * 1.0 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));  // erf oracle
  CHECK(ge[1] == doctest::Approx(gelu1).epsilon(1e-12));
  CHECK(ge[0] == 0.0);
}

TEST_CASE("adamw examples") {
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  cfg.eps = 1e-9;

  SUBCASE("zero grad, zero decay is a fixed point") {
    Tensor p({3}, {1.0, -2.0, 0.5});
    Tensor g({3});
    AdamMoments m;
    adamw_step(p, g, m, 1, cfg);
    CHECK(max_abs_diff(p, Tensor({3}, {1.0, -2.0, 0.5})) == 0.0);
    CHECK(l2_norm(m.m) == 0.0);
    CHECK(l2_norm(m.v) == 0.0);
  }

  SUBCASE("zero grad with decay scales by 1 - lr*wd") {
    cfg.weight_decay = 0.1;
    Tensor p({2}, {1.0, -4.0});
    AdamMoments m;
    adamw_step(p, Tensor({2}), m, 1, cfg);
    CHECK(p[0] == doctest::Approx(0.999).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-3.996).epsilon(1e-15));
  }

  SUBCASE("constant grad at step 1 gives delta = -lr*g/(|g|+eps)") {
    cfg.weight_decay = 0.0;
    const double g = 0.37;
    Tensor p({1}, {2.0});
    AdamMoments m;
    adamw_step(p, Tensor({1}, {g}), m, 1, cfg);
    // bias correction makes mhat = g and vhat = g^2 at step 1
    const double expect = 2.0 - cfg.lr * g / (std::fabs(g) + cfg.eps);
    CHECK(p[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("non-positive lr is a config error") {
    cfg.lr = 0.0;
    Tensor p({1}, {1.0});
    AdamMoments m;
    CHECK_THROWS_AS(adamw_step(p, Tensor({1}), m, 1, cfg), ConfigError);
  }
}

TEST_CASE("grad_check on closed forms") {
  SUBCASE("sum of squares") {
    Rng rng(18);
    Tensor p = rng.gaussian_tensor({7}, 1.0);
    auto loss = [&]() { return tape_loss_sum_squares(p); };
    auto grads = [&]() {
      Tape tape;
      Value x = tape.leaf(p);
      Value l = tape.weighted_sum(tape.reshape(tape.mul(x, x), {7}), std::vector<double>(7, 1.0));
      tape.backward(l);
      return std::vector<Tensor>{tape.grad(x)};
    };
    CHECK(grad_check({&p}, loss, grads, 30, 1e-5, 99).max_rel_error < 1e-8);
  }

  SUBCASE("cross entropy through softmax path") {
    Rng rng(19);
    Tensor logits = rng.gaussian_tensor({2, 3}, 1.0);
    std::vector<int> targets = {2, 0};
    auto loss = [&]() {
      Tape tape;
      return tape.val(tape.cross_entropy(tape.leaf(logits), targets)).item();
    };
    auto grads = [&]() {
      Tape tape;
      Value l = tape.leaf(logits);
      tape.backward(tape.cross_entropy(l, targets));
      return std::vector<Tensor>{tape.grad(l)};
    };
    CHECK(grad_check({&logits}, loss, grads, 40, 1e-5, 100).max_rel_error < 1e-6);
  }

  SUBCASE("constant function has ~zero error") {
    Tensor p({4}, {1.0, 2.0, 3.0, 4.0});
    auto loss = [&]() { return 3.25; };
    auto grads = [&]() { return std::vector<Tensor>{Tensor({4})}; };
    CHECK(grad_check({&p}, loss, grads, 10, 1e-5, 101).max_rel_error < 1e-10);
  }
}

TEST_CASE("per-op gradient checks over random small shapes") {
  Rng rng(20);
  // Composite touching every op backward: conv, pool, activations, bias,
  // rows, concat, embedding, ssm kernel.
  Tensor table = rng.gaussian_tensor({5, 3}, 1.0);
  Tensor kernel = rng.gaussian_tensor({2, 3}, 1.0);
  Tensor rows = rng.gaussian_tensor({2, 3}, 1.0);
  Tensor bias = rng.gaussian_tensor({3}, 1.0);
  Tensor mixw = rng.gaussian_tensor({3, 3}, 1.0);
  Tensor rho = rng.uniform_tensor({3}, -2.0, 0.0);
  Tensor sb = rng.gaussian_tensor({3}, 1.0);
  Tensor sc = rng.gaussian_tensor({3}, 1.0);
  const std::vector<int> ids = {0, 3, 4, 1, 2, 0, 1, 4};

  auto build = [&](Tape& tape, std::vector<Value>* leaves) -> Value {
    Value tb = tape.leaf(table);
    Value kv = tape.leaf(kernel);
    Value rv = tape.leaf(rows);
    Value bv = tape.leaf(bias);
    Value mv = tape.leaf(mixw);
    Value rh = tape.leaf(rho);
    Value sbv = tape.leaf(sb);
    Value scv = tape.leaf(sc);
    if (leaves) *leaves = {tb, kv, rv, bv, mv, rh, sbv, scv};
    Value e = tape.embedding(tb, ids, 2, 4);
    Value a = tape.scale(tape.exp_op(rh), -1.0);
    Value sk = tape.ssm_kernel(a, sbv, scv, 0.7, 3);
    Value conv = tape.add(tape.causal_conv1d(e, kv, 2), tape.causal_conv1d(e, sk, 1));
    Value gated = tape.mul(conv, tape.sigmoid_op(e));
    Value act = tape.gelu_op(tape.add_rows(gated, rv));
    Value pooled = tape.mean_pool_tokens(tape.tanh_op(act));
    Value cat = tape.concat_cols(pooled, pooled);
    Value w_cat = tape.reshape(tape.concat_cols(mv, mv), {6, 3});
    Value mixed = tape.add_bias(tape.matmul(cat, w_cat), bv);
    Value probs = tape.softmax(mixed);
    return tape.weighted_sum(tape.reshape(probs, {6}), {0.9, -0.4, 1.7, 0.3, -1.1, 0.5});
  };

  std::vector<Tensor*> params = {&table, &kernel, &rows, &bias, &mixw, &rho, &sb, &sc};
  auto loss = [&]() {
    Tape tape;
    return tape.val(build(tape, nullptr)).item();
  };
  auto grads = [&]() {
    Tape tape;
    std::vector<Value> leaves;
    Value l = build(tape, &leaves);
    tape.backward(l);
    std::vector<Tensor> out;
    for (Value v : leaves) out.push_back(tape.grad(v));
    return out;
  };
  CHECK(grad_check(params, loss, grads, 120, 1e-5, 2024).max_rel_error < 1e-6);
}

TEST_CASE("non-finite op output raises NumericError naming the op") {
  Tape tape;
  Value big = tape.leaf(Tensor({1}, {1e308}));
  try {
    tape.exp_op(big);  // overflows to inf
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.op_name == "exp");
  }
}

TEST_CASE("tape visits each node once and constants block gradients") {
  Tape tape;
  Tensor x({2}, {1.0, 2.0});
  Value leaf = tape.leaf(x);
  Value cons = tape.constant(Tensor({2}, {5.0, 5.0}));
  Value both = tape.mul(leaf, cons);
  Value reused = tape.add(both, both);  // diamond: node feeds two consumers
  Value loss = tape.weighted_sum(reused, {1.0, 1.0});
  tape.backward(loss);
  const Tensor g = tape.grad(leaf);
  CHECK(g[0] == doctest::Approx(10.0));  // 2 paths x constant 5
  CHECK(g[1] == doctest::Approx(10.0));
  CHECK(l2_norm(tape.grad(cons)) == 0.0);
}
