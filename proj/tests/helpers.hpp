#pragma once

#include <cmath>
#include <functional>

#include "sbs/tensor.hpp"

namespace sbs::test {

// Central finite differences of a scalar function, step 1e-5. The reference
// oracle for every analytic gradient in the suite.
inline Tensor fd_grad(const std::function<double(const Tensor&)>& f, Tensor x,
                      double h = 1e-5) {
  Tensor g = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace sbs::test
