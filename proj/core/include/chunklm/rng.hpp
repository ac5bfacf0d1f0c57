#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Deterministic RNG. All draws are derived from mt19937_64 output directly
// (no std::*_distribution) so streams are reproducible independent of the
// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(eng_() % range);
  }

  // Standard normal via Box-Muller.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  Tensor gaussian_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    double* p = t.mutable_data();
    for (std::int64_t i = 0; i < t.size(); ++i) p[i] = stddev * gaussian();
    return t;
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    double* p = t.mutable_data();
    for (std::int64_t i = 0; i < t.size(); ++i) p[i] = uniform(lo, hi);
    return t;
  }

  // Engine-state serialization for exact training resume. The Box-Muller
  // spare is stored as raw bits so the round trip is lossless.
  std::string save_state() const {
    std::ostringstream os;
    std::uint64_t bits = 0;
    static_assert(sizeof(bits) == sizeof(spare_));
    std::memcpy(&bits, &spare_, sizeof(bits));
    os << eng_ << " " << (have_spare_ ? 1 : 0) << " " << bits;
    return os.str();
  }
  void load_state(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    std::uint64_t bits = 0;
    is >> eng_ >> flag >> bits;
    have_spare_ = (flag != 0);
    std::memcpy(&spare_, &bits, sizeof(bits));
    if (!is) throw IoError("bad rng state string");
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace chunklm
