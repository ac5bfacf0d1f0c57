#include <doctest.h>

#include <cmath>

#include "chunklm/gradcheck.hpp"
#include "chunklm/rng.hpp"
#include "chunklm/ssm.hpp"

using namespace chunklm;

namespace {

SsmParams make_params(double a_value, double b_value, double c_value, double delta, int taps) {
  SsmParams p;
  // rho = log(-a); for the a -> 0 limit tests we bypass rho and build the
  // kernel through the tape op directly.
  p.rho = Tensor({1}, {std::log(-a_value)});
  p.b = Tensor({1}, {b_value});
  p.cvec = Tensor({1}, {c_value});
  p.delta = delta;
  p.taps = taps;
  return p;
}

Tensor kernel_for_a(double a_value, double b_value, double c_value, double delta, int taps) {
  Tape tape;
  Value a = tape.constant(Tensor({1}, {a_value}));
  Value b = tape.constant(Tensor({1}, {b_value}));
  Value c = tape.constant(Tensor({1}, {c_value}));
  return tape.val(tape.ssm_kernel(a, b, c, delta, taps));
}

}  // namespace

TEST_CASE("build_kernel zero-order hold") {
  SUBCASE("a -> 0 limit gives the running-sum kernel") {
    const Tensor k = kernel_for_a(0.0, 1.0, 1.0, 1.0, 5);
    for (int j = 0; j < 5; ++j) CHECK(k[j] == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("a = -ln 2 closed form") {
    const double ln2 = std::log(2.0);
    const Tensor k = kernel_for_a(-ln2, 1.0, 1.0, 1.0, 4);
    const double bbar = 0.5 / ln2;  // (abar - 1)/a with abar = 1/2
    for (int j = 0; j < 4; ++j) {
      CHECK(k[j] == doctest::Approx(bbar * std::pow(0.5, j)).epsilon(1e-12));
    }
    CHECK(k[0] == doctest::Approx(0.7213475).epsilon(1e-6));
  }

  SUBCASE("cvec = 0 zeroes the kernel") {
    const Tensor k = kernel_for_a(-0.3, 1.7, 0.0, 1.0, 6);
    CHECK(l2_norm(k) == 0.0);
  }

  SUBCASE("build_kernel on SsmParams uses rho parameterization") {
    SsmParams p = make_params(-std::log(2.0) /*a*/, 1.0, 1.0, 1.0, 3);
    const Tensor k = build_kernel(p);
    CHECK(k[1] == doctest::Approx(0.5 * 0.5 / std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("invalid config") {
    Tape tape;
    Value a = tape.constant(Tensor({1}, {-0.5}));
    CHECK_THROWS_AS(tape.ssm_kernel(a, a, a, 0.0, 3), ConfigError);
    CHECK_THROWS_AS(tape.ssm_kernel(a, a, a, 1.0, 0), ConfigError);
  }
}

TEST_CASE("kernel magnitude is non-increasing for a < 0") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = -std::exp(rng.uniform(-5.0, 1.0));
    const double b = rng.gaussian();
    const double c = rng.gaussian();
    const double delta = std::exp(rng.uniform(-2.0, 1.0));
    const Tensor k = kernel_for_a(a, b, c, delta, 8);
    for (int j = 0; j + 1 < 8; ++j) CHECK(std::fabs(k[j + 1]) <= std::fabs(k[j]) + 1e-15);
  }
}

TEST_CASE("ssm_forward composition") {
  SUBCASE("zero gate weights halve the conv contribution") {
    // 1 channel, 3 tokens; gate = sigmoid(0) = 0.5 everywhere.
    Tensor x({1, 3, 1}, {1.0, -2.0, 0.5});
    Tape tape;
    SsmValues sv;
    sv.rho = tape.leaf(Tensor({1}, {std::log(std::log(2.0))}));  // a = -ln 2
    sv.b = tape.leaf(Tensor({1}, {1.0}));
    sv.cvec = tape.leaf(Tensor({1}, {1.0}));
    sv.gate_w = tape.leaf(Tensor({1, 1}));
    sv.gate_b = tape.leaf(Tensor({1}));
    Value out = ssm_forward(tape, tape.leaf(x), sv, 1.0, 3);

    const Tensor k = kernel_for_a(-std::log(2.0), 1.0, 1.0, 1.0, 3);
    for (int t = 0; t < 3; ++t) {
      double conv = 0.0;
      for (int j = 0; j <= t; ++j) conv += k[j] * x[t - j];
      CHECK(tape.val(out)[t] == doctest::Approx(x[t] + 0.5 * conv).epsilon(1e-12));
    }
  }

  SUBCASE("zero kernel reduces to the residual identity") {
    Rng rng(32);
    Tensor x = rng.gaussian_tensor({2, 4, 3}, 1.0);
    Tape tape;
    SsmValues sv;
    sv.rho = tape.leaf(rng.uniform_tensor({3}, -2.0, 0.0));
    sv.b = tape.leaf(rng.gaussian_tensor({3}, 1.0));
    sv.cvec = tape.leaf(Tensor({3}));  // C = 0 kills the kernel
    sv.gate_w = tape.leaf(rng.gaussian_tensor({3, 3}, 1.0));
    sv.gate_b = tape.leaf(rng.gaussian_tensor({3}, 1.0));
    Value out = ssm_forward(tape, tape.leaf(x), sv, 1.0, 4);
    CHECK(max_abs_diff(tape.val(out), x) == 0.0);
  }

  SUBCASE("kernel longer than chunk is a config error") {
    Tape tape;
    SsmValues sv;
    sv.rho = tape.leaf(Tensor({1}));
    sv.b = tape.leaf(Tensor({1}));
    sv.cvec = tape.leaf(Tensor({1}));
    sv.gate_w = tape.leaf(Tensor({1, 1}));
    sv.gate_b = tape.leaf(Tensor({1}));
    CHECK_THROWS_AS(ssm_forward(tape, tape.leaf(Tensor({1, 2, 1})), sv, 1.0, 3), ConfigError);
  }
}

TEST_CASE("recurrence oracle") {
  SUBCASE("zero input stays zero") {
    SsmParams p = make_params(-0.5, 1.3, 0.8, 1.0, 4);
    CHECK(l2_norm(ssm_scan_oracle(Tensor({1, 6, 1}), p)) == 0.0);
  }

  SUBCASE("single impulse unrolls to cvec * abar^t * bbar") {
    SsmParams p = make_params(-0.7, 1.1, -0.9, 0.5, 4);
    Tensor x({1, 5, 1});
    x.mutable_data()[0] = 1.0;
    const Tensor y = ssm_scan_oracle(x, p);
    const double abar = std::exp(-0.7 * 0.5);
    const double bbar = std::expm1(-0.7 * 0.5) / -0.7 * 1.1;
    for (int t = 0; t < 5; ++t) {
      CHECK(y[t] == doctest::Approx(-0.9 * std::pow(abar, t) * bbar).epsilon(1e-12));
    }
  }

  SUBCASE("conv path equals the recurrence when taps = chunk length") {
    Rng rng(33);
    for (int trial = 0; trial < 25; ++trial) {
      const int c = 6, d = 3;
      SsmParams p;
      p.rho = rng.uniform_tensor({d}, -3.0, 0.5);
      p.b = rng.gaussian_tensor({d}, 1.0);
      p.cvec = rng.gaussian_tensor({d}, 1.0);
      p.delta = std::exp(rng.uniform(-1.0, 0.5));
      p.taps = c;
      Tensor x = rng.gaussian_tensor({2, c, d}, 1.0);

      Tape tape;
      Value kernel = tape.constant(build_kernel(p));
      const Tensor conv = tape.val(tape.causal_conv1d(tape.constant(x), kernel, 1));
      const Tensor scan = ssm_scan_oracle(x, p);
      CHECK(max_abs_diff(conv, scan) < 1e-10);
    }
  }
}

TEST_CASE("ssm_forward causality is bitwise") {
  Rng rng(34);
  const int c = 8, d = 2;
  Tensor x = rng.gaussian_tensor({1, c, d}, 1.0);
  SsmParams p;
  p.rho = rng.uniform_tensor({d}, -2.0, 0.0);
  p.b = rng.gaussian_tensor({d}, 1.0);
  p.cvec = rng.gaussian_tensor({d}, 1.0);
  Tensor gw = rng.gaussian_tensor({d, d}, 1.0);
  Tensor gb = rng.gaussian_tensor({d}, 1.0);

  auto run = [&](const Tensor& input) {
    Tape tape;
    SsmValues sv;
    sv.rho = tape.leaf(p.rho);
    sv.b = tape.leaf(p.b);
    sv.cvec = tape.leaf(p.cvec);
    sv.gate_w = tape.leaf(gw);
    sv.gate_b = tape.leaf(gb);
    return tape.val(ssm_forward(tape, tape.leaf(input), sv, 1.0, 4));
  };

  const Tensor base = run(x);
  for (int t : {2, 5}) {
    Tensor bumped = x;
    bumped.mutable_data()[t * d] += 1.0;
    const Tensor other = run(bumped);
    for (int tt = 0; tt < t; ++tt) {
      for (int ch = 0; ch < d; ++ch) CHECK(base[tt * d + ch] == other[tt * d + ch]);
    }
  }
}

TEST_CASE("gradient check through all SSM parameter fields") {
  Rng rng(35);
  const int c = 5, d = 2;
  Tensor x = rng.gaussian_tensor({1, c, d}, 1.0);
  Tensor rho = rng.uniform_tensor({d}, -2.0, 0.0);
  Tensor b = rng.gaussian_tensor({d}, 1.0);
  Tensor cv = rng.gaussian_tensor({d}, 1.0);
  Tensor gw = rng.gaussian_tensor({d, d}, 1.0);
  Tensor gb = rng.gaussian_tensor({d}, 1.0);

  auto build = [&](Tape& tape, std::vector<Value>* leaves) {
    SsmValues sv;
    sv.rho = tape.leaf(rho);
    sv.b = tape.leaf(b);
    sv.cvec = tape.leaf(cv);
    sv.gate_w = tape.leaf(gw);
    sv.gate_b = tape.leaf(gb);
    if (leaves) *leaves = {sv.rho, sv.b, sv.cvec, sv.gate_w, sv.gate_b};
    Value out = ssm_forward(tape, tape.constant(x), sv, 0.8, 3);
    return tape.weighted_sum(tape.reshape(tape.tanh_op(out), {c * d}),
                             std::vector<double>(static_cast<std::size_t>(c * d), 0.7));
  };
  std::vector<Tensor*> params = {&rho, &b, &cv, &gw, &gb};
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
  CHECK(grad_check(params, loss, grads, 60, 1e-5, 777).max_rel_error < 1e-6);
}
