#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "sbs/autodiff.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

// Round half toward the lower code: round(x) = ceil(x - 0.5), so 0.5 -> 0 and
// -0.5 -> -1. The 1e-9 guard widens the round-down zone so the direct and the
// residual discretization paths agree when x sits within float-rounding noise
// of a half-integer; see decisions on tie handling.
constexpr double kRoundTieGuard = 1e-9;

inline double round_half_down(double x) { return std::ceil(x - 0.5 - kRoundTieGuard); }

// Uniform step for a k-bit code: s = 1/(2^k - 1).
inline double step_size_for_bits(int bits) {
  if (bits < 1 || bits > 8) {
    throw std::invalid_argument("step_size_for_bits: bits must be in [1, 8], got " +
                                std::to_string(bits));
  }
  return 1.0 / static_cast<double>((1 << bits) - 1);
}

inline void check_step(const char* fn, double s) {
  if (!(s > 0.0) || s > 1.0) {
    throw std::invalid_argument(std::string(fn) + ": step must be in (0, 1], got " +
                                std::to_string(s));
  }
}

inline void check_interval(const char* fn, double v) {
  if (!(v > 0.0)) {
    throw std::invalid_argument(std::string(fn) +
                                ": clipping interval must be positive, got " +
                                std::to_string(v));
  }
}

// D(z, s) = s * round(z / s).
inline double discretize(double z, double s) {
  check_step("discretize", s);
  const double levels = 1.0 / s;
  return round_half_down(z * levels) / levels;
}

inline Tensor discretize(const Tensor& z, double s) {
  check_step("discretize", s);
  const double levels = 1.0 / s;
  return map(z, [levels](double v) { return round_half_down(v * levels) / levels; });
}

// Per-layer learnable clipping interval. Positive at all times; the training
// loop reprojects after each update.
struct QuantInterval {
  double v = 1.0;

  explicit QuantInterval(double value = 1.0) : v(value) {
    check_interval("QuantInterval", v);
  }
};

// ---- plain tensor transforms ----

// Activations: z = clip(x / v, 0, 1).
inline Tensor normalize_act(const Tensor& x, double v) {
  check_interval("normalize_act", v);
  return map(x, [v](double t) { return std::clamp(t / v, 0.0, 1.0); });
}

// Weights: z = (clip(w / v, -1, 1) + 1) / 2.
inline Tensor normalize_wt(const Tensor& w, double v) {
  check_interval("normalize_wt", v);
  return map(w, [v](double t) { return (std::clamp(t / v, -1.0, 1.0) + 1.0) / 2.0; });
}

inline Tensor quantize_act(const Tensor& x, double v, int bits) {
  const double s = step_size_for_bits(bits);
  Tensor q = discretize(normalize_act(x, v), s);
  return scale(q, v);
}

inline Tensor quantize_wt(const Tensor& w, double v, int bits) {
  const double s = step_size_for_bits(bits);
  Tensor q = discretize(normalize_wt(w, v), s);
  return map(q, [v](double t) { return v * (2.0 * t - 1.0); });
}

// ---- autodiff ops ----
//
// Gradients follow the straight-through convention: D passes the upstream
// gradient unchanged and receives none for s; the clip passes gradient only
// inside the unclipped region; v additionally receives the denormalization
// term. Together quantize_wt's gradient to w equals that of the surrogate
// clip(w, -v, v), i.e. 1 inside and 0 outside.

namespace qops {

inline const ad::CustomOp& normalize_act_op() {
  static const ad::CustomOp op = ad::register_custom_grad(
      "normalize_act", 2,
      [](const std::vector<Tensor>& in) {
        if (!in[1].is_scalar()) {
          throw std::invalid_argument("normalize_act: interval must be a scalar");
        }
        return normalize_act(in[0], in[1].item());
      },
      [](const std::vector<Tensor>& in, const Tensor& up) {
        const Tensor& x = in[0];
        const double v = in[1].item();
        Tensor gx = up;
        double gv = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double z = x[i] / v;
          const bool inside = z > 0.0 && z < 1.0;
          gx[i] = inside ? up[i] / v : 0.0;
          if (inside) gv += up[i] * (-x[i] / (v * v));
        }
        return std::vector<Tensor>{gx, Tensor::scalar(gv)};
      });
  return op;
}

inline const ad::CustomOp& normalize_wt_op() {
  static const ad::CustomOp op = ad::register_custom_grad(
      "normalize_wt", 2,
      [](const std::vector<Tensor>& in) {
        if (!in[1].is_scalar()) {
          throw std::invalid_argument("normalize_wt: interval must be a scalar");
        }
        return normalize_wt(in[0], in[1].item());
      },
      [](const std::vector<Tensor>& in, const Tensor& up) {
        const Tensor& w = in[0];
        const double v = in[1].item();
        Tensor gw = up;
        double gv = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double r = w[i] / v;
          const bool inside = r > -1.0 && r < 1.0;
          gw[i] = inside ? up[i] / (2.0 * v) : 0.0;
          if (inside) gv += up[i] * (-w[i] / (2.0 * v * v));
        }
        return std::vector<Tensor>{gw, Tensor::scalar(gv)};
      });
  return op;
}

}  // namespace qops

inline ad::NodePtr normalize_act(const ad::NodePtr& x, const ad::NodePtr& v) {
  check_interval("normalize_act", v->value().item());
  return ad::apply(qops::normalize_act_op(), {x, v});
}

inline ad::NodePtr normalize_wt(const ad::NodePtr& w, const ad::NodePtr& v) {
  check_interval("normalize_wt", v->value().item());
  return ad::apply(qops::normalize_wt_op(), {w, v});
}

// D with identity backward; the upstream tensor is returned untouched.
inline ad::NodePtr discretize_ste(const ad::NodePtr& z, double s) {
  check_step("discretize_ste", s);
  ad::CustomOp op = ad::register_custom_grad(
      "discretize_ste", 1,
      [s](const std::vector<Tensor>& in) { return discretize(in[0], s); },
      [](const std::vector<Tensor>&, const Tensor& up) {
        return std::vector<Tensor>{up};
      });
  return ad::apply(op, {z});
}

inline ad::NodePtr quantize_act(const ad::NodePtr& x, const ad::NodePtr& v, int bits) {
  const double s = step_size_for_bits(bits);
  auto z = normalize_act(x, v);
  auto d = discretize_ste(z, s);
  return ad::mul(d, v);
}

inline ad::NodePtr quantize_wt(const ad::NodePtr& w, const ad::NodePtr& v, int bits) {
  const double s = step_size_for_bits(bits);
  auto z = normalize_wt(w, v);
  auto d = discretize_ste(z, s);
  return ad::mul(ad::add_scalar(ad::mul_scalar(d, 2.0), -1.0), v);
}

}  // namespace sbs
