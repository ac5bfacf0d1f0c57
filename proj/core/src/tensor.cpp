#include "chunklm/tensor.hpp"

#include <atomic>
#include <cmath>
#include <utility>

namespace chunklm {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace float_count {
namespace {
std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
}  // namespace

std::int64_t current() { return g_current.load(std::memory_order_relaxed); }
std::int64_t peak() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_current.load(std::memory_order_relaxed), std::memory_order_relaxed); }

void add(std::int64_t n) {
  std::int64_t cur = g_current.fetch_add(n, std::memory_order_relaxed) + n;
  std::int64_t p = g_peak.load(std::memory_order_relaxed);
  while (cur > p && !g_peak.compare_exchange_weak(p, cur, std::memory_order_relaxed)) {
  }
}

void sub(std::int64_t n) { g_current.fetch_sub(n, std::memory_order_relaxed); }
}  // namespace float_count

CountedDoubles::CountedDoubles(std::size_t n, double fill) : v_(n, fill), counted_(n) {
  float_count::add(static_cast<std::int64_t>(n));
}

CountedDoubles::CountedDoubles(std::vector<double> v) : v_(std::move(v)), counted_(v_.size()) {
  float_count::add(static_cast<std::int64_t>(counted_));
}

CountedDoubles::~CountedDoubles() { float_count::sub(static_cast<std::int64_t>(counted_)); }

CountedDoubles::CountedDoubles(const CountedDoubles& other) : v_(other.v_), counted_(other.counted_) {
  float_count::add(static_cast<std::int64_t>(counted_));
}

CountedDoubles& CountedDoubles::operator=(const CountedDoubles& other) {
  if (this != &other) {
    float_count::sub(static_cast<std::int64_t>(counted_));
    v_ = other.v_;
    counted_ = other.counted_;
    float_count::add(static_cast<std::int64_t>(counted_));
  }
  return *this;
}

CountedDoubles::CountedDoubles(CountedDoubles&& other) noexcept
    : v_(std::move(other.v_)), counted_(other.counted_) {
  other.counted_ = 0;
  other.v_.clear();
}

CountedDoubles& CountedDoubles::operator=(CountedDoubles&& other) noexcept {
  if (this != &other) {
    float_count::sub(static_cast<std::int64_t>(counted_));
    v_ = std::move(other.v_);
    counted_ = other.counted_;
    other.counted_ = 0;
    other.v_.clear();
  }
  return *this;
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      buf_(std::make_shared<CountedDoubles>(static_cast<std::size_t>(shape_numel(shape_)))) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape_));
  }
  buf_ = std::make_shared<CountedDoubles>(std::move(data));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

double* Tensor::mutable_data() {
  if (!buf_) throw ShapeError("mutable_data on undefined tensor");
  if (buf_.use_count() > 1) buf_ = std::make_shared<CountedDoubles>(*buf_);
  return buf_->data();
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
  return (*buf_)[0];
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != size()) {
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                     " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(s);
  t.buf_ = buf_;
  return t;
}

bool all_finite(const Tensor& t) {
  const double* p = t.data();
  const std::int64_t n = t.size();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

void check_finite(const Tensor& t, const char* op) {
  if (!all_finite(t)) throw NumericError(op, "non-finite value in output " + shape_str(t.shape()));
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    double d = std::fabs(a[i] - b[i]);
    if (d > m) m = d;
  }
  return m;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

}  // namespace chunklm
