#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace chunklm {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// ---------------------------------------------------------------------------
// Error taxonomy. Everything numeric-facing derives from std::runtime_error
// so the CLI can map categories to exit codes.
// ---------------------------------------------------------------------------
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised the moment any op produces a NaN/Inf; names the op.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& op, const std::string& detail = "")
      : std::runtime_error("numeric failure in op '" + op + "'" +
                           (detail.empty() ? "" : ": " + detail)),
        op_name(op) {}
  std::string op_name;
};
// Raised when a deliberate resource guard refuses to run (attention n x n).
struct GuardError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Live-float accounting. Every tensor buffer (and the memory store's
// preallocated key/value arrays) registers its element count on allocation
// and deregisters on free. peak() is the high-water mark the scaling
// benchmark reports; it is deterministic because allocation order is.
// ---------------------------------------------------------------------------
namespace float_count {
std::int64_t current();
std::int64_t peak();
void reset_peak();  // peak := current
void add(std::int64_t n);
void sub(std::int64_t n);
}  // namespace float_count

// Fixed-size double array whose element count is registered with
// float_count for its whole lifetime.
class CountedDoubles {
 public:
  CountedDoubles() = default;
  explicit CountedDoubles(std::size_t n, double fill = 0.0);
  explicit CountedDoubles(std::vector<double> v);
  ~CountedDoubles();
  CountedDoubles(const CountedDoubles& other);
  CountedDoubles& operator=(const CountedDoubles& other);
  CountedDoubles(CountedDoubles&& other) noexcept;
  CountedDoubles& operator=(CountedDoubles&& other) noexcept;

  std::size_t size() const { return v_.size(); }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

 private:
  std::vector<double> v_;
  std::size_t counted_ = 0;
};

// ---------------------------------------------------------------------------
// Dense row-major tensor of doubles. Value semantics with a shared immutable
// buffer: copies are cheap, reshape shares storage, mutable_data() does
// copy-on-write when the buffer is shared.
// ---------------------------------------------------------------------------
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);

  bool defined() const { return buf_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }

  const double* data() const { return buf_->data(); }
  double* mutable_data();
  double operator[](std::int64_t i) const { return (*buf_)[static_cast<std::size_t>(i)]; }
  double item() const;

  Tensor reshaped(Shape s) const;  // same element count, shares the buffer

 private:
  Shape shape_;
  std::shared_ptr<CountedDoubles> buf_;
};

bool all_finite(const Tensor& t);
void check_finite(const Tensor& t, const char* op);
bool same_shape(const Tensor& a, const Tensor& b);

// Max |a - b| over all elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);

}  // namespace chunklm
