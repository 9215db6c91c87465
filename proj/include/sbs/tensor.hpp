#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbs {

// Dense row-major tensor of 64-bit reals. Rank 0 is not used; scalars are
// tensors of size 1 (shape {1}).
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_string(shape_) +
                                  " does not match data size " +
                                  std::to_string(data_.size()));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::vector<double> d(count(shape), 0.0);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    std::vector<double> d(count(shape), v);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Scalar read; errors on non-scalars so callers cannot silently drop values.
  double item() const {
    if (!is_scalar()) {
      throw std::invalid_argument("Tensor::item: tensor of shape " +
                                  shape_string(shape_) + " is not a scalar");
    }
    return data_[0];
  }

  double& at(std::size_t i, std::size_t j) {
    check_2d("Tensor::at");
    return data_[i * shape_[1] + j];
  }
  double at(std::size_t i, std::size_t j) const {
    check_2d("Tensor::at");
    return data_[i * shape_[1] + j];
  }

  std::size_t rows() const {
    check_2d("Tensor::rows");
    return shape_[0];
  }
  std::size_t cols() const {
    check_2d("Tensor::cols");
    return shape_[1];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static std::string shape_string(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << ",";
      os << s[i];
    }
    os << "]";
    return os.str();
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  void check_2d(const char* fn) const {
    if (shape_.size() != 2) {
      throw std::invalid_argument(std::string(fn) + ": expected rank-2 tensor, got " +
                                  shape_string(shape_));
    }
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {

// Shared entry for elementwise binaries: equal shapes, or one side scalar.
// Anything else is a shape error; there is no general broadcasting.
template <class F>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.is_scalar()) {
    Tensor out = a;
    const double s = b[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], s);
    return out;
  }
  if (a.is_scalar()) {
    Tensor out = b;
    const double s = a[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, b[i]);
    return out;
  }
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              Tensor::shape_string(a.shape()) + " vs " +
                              Tensor::shape_string(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise("add", a, b, [](double x, double y) { return x + y; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise("sub", a, b, [](double x, double y) { return x - y; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise("mul", a, b, [](double x, double y) { return x * y; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise("div", a, b, [](double x, double y) { return x / y; });
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.data()) v *= c;
  return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out = a;
  for (double& v : out.data()) v = f(v);
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                Tensor::shape_string(a.shape()) + " vs " +
                                Tensor::shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  // No zero-skipping: 0 * nan must stay nan so bad values reach the loss.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose: expected rank-2 tensor, got " +
                                Tensor::shape_string(a.shape()));
  }
  Tensor out = Tensor::zeros({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

inline double sum(const Tensor& a) {
  return std::accumulate(a.data().begin(), a.data().end(), 0.0);
}

inline double mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return sum(a) / static_cast<double>(a.size());
}

inline double l1_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += std::abs(v);
  return s;
}

inline double mean_abs(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean_abs: empty tensor");
  return l1_norm(a) / static_cast<double>(a.size());
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace sbs
