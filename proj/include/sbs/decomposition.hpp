#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbs/autodiff.hpp"
#include "sbs/quantizer.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

// Strictly increasing bitwidths b_1 < ... < b_K where each rung is an integer
// multiple of its predecessor. That multiplicity is exactly what makes
// (2^{b_{j+1}} - 1) divisible by (2^{b_j} - 1), so every coarse grid is a
// subset of every finer one and offsets can share a single path.
class BitLadder {
 public:
  static BitLadder of(std::vector<int> bits) {
    if (bits.empty() || bits.size() > 4) {
      throw std::invalid_argument("BitLadder: expected 1 to 4 rungs, got " +
                                  std::to_string(bits.size()));
    }
    for (std::size_t j = 0; j < bits.size(); ++j) {
      if (bits[j] < 1 || bits[j] > 8) {
        throw std::invalid_argument("BitLadder: bitwidth " + std::to_string(bits[j]) +
                                    " outside supported range [1, 8]");
      }
      if (j > 0) {
        if (bits[j] % bits[j - 1] != 0 || bits[j] / bits[j - 1] < 2) {
          throw std::invalid_argument(
              "BitLadder: bitwidth " + std::to_string(bits[j]) +
              " does not extend " + std::to_string(bits[j - 1]) +
              " by an integer factor >= 2");
        }
      }
    }
    return BitLadder(std::move(bits));
  }

  static BitLadder default_ladder() { return of({2, 4, 8}); }

  const std::vector<int>& bits() const { return bits_; }
  int rungs() const { return static_cast<int>(bits_.size()); }
  int bit(int j) const { return bits_.at(j); }
  int max_bits() const { return bits_.back(); }

  // Number of steps: 2^b - 1, exact in a double.
  double levels(int j) const { return static_cast<double>((1 << bits_.at(j)) - 1); }
  double step(int j) const { return 1.0 / levels(j); }

  BitLadder prefix(int rungs) const {
    if (rungs < 1 || rungs > static_cast<int>(bits_.size())) {
      throw std::invalid_argument("BitLadder::prefix: bad rung count " +
                                  std::to_string(rungs));
    }
    return BitLadder(std::vector<int>(bits_.begin(), bits_.begin() + rungs));
  }

  bool operator==(const BitLadder& o) const { return bits_ == o.bits_; }

 private:
  explicit BitLadder(std::vector<int> bits) : bits_(std::move(bits)) {}
  std::vector<int> bits_;
};

// z_{b_K} split as z_{b_1} + sum of per-rung offsets. The offsets are computed
// from the running partial sum, never by re-discretizing z directly; the
// prefix identity z_{b_j} == base + r_2 + ... + r_j is therefore a theorem
// about this construction, and the tests treat it that way.
struct BitDecomposition {
  BitLadder ladder;
  Tensor base;                       // z_{b_1}
  std::vector<Tensor> offsets;       // r_{b_j}, j = 2..K
  std::vector<double> gate_metrics;  // mean |z - z_{b_{j-1}}|, j = 2..K

  // Partial sum through `rungs` rungs (1 = base only).
  Tensor reconstruct(int rungs) const {
    if (rungs < 1 || rungs > ladder.rungs()) {
      throw std::invalid_argument("BitDecomposition::reconstruct: bad rung count " +
                                  std::to_string(rungs));
    }
    Tensor out = base;
    for (int j = 1; j < rungs; ++j) out = add(out, offsets[j - 1]);
    return out;
  }

  Tensor full() const { return reconstruct(ladder.rungs()); }
};

inline void check_unit_range(const char* fn, const Tensor& z) {
  for (double v : z.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument(std::string(fn) + ": entry " + std::to_string(v) +
                                  " outside [0, 1]");
    }
  }
}

inline BitDecomposition decompose(const Tensor& z, const BitLadder& ladder) {
  check_unit_range("decompose", z);
  BitDecomposition d{ladder, discretize(z, ladder.step(0)), {}, {}};
  Tensor partial = d.base;
  for (int j = 1; j < ladder.rungs(); ++j) {
    const Tensor residual = sub(z, partial);
    d.gate_metrics.push_back(mean_abs(residual));
    const Tensor r = discretize(residual, ladder.step(j));
    partial = add(partial, r);
    d.offsets.push_back(std::move(r));
  }
  return d;
}

// True iff every point of every coarse grid lies exactly on all finer grids.
// Enumerates codes rather than trusting the divisibility argument.
inline bool verify_grid_subset(const BitLadder& ladder) {
  for (int j = 0; j + 1 < ladder.rungs(); ++j) {
    const double coarse = ladder.levels(j);
    for (int fine_j = j + 1; fine_j < ladder.rungs(); ++fine_j) {
      const double fine = ladder.levels(fine_j);
      for (int i = 0; i <= static_cast<int>(coarse); ++i) {
        const double q = (static_cast<double>(i) / coarse) * fine;
        if (std::abs(q - std::nearbyint(q)) > 1e-12) return false;
      }
    }
  }
  return true;
}

// Relative L1 error of z under each ladder prefix, with the matching
// truncation bound C / (2^{b_K} - 1), C = d / |z|_1.
struct QuantErrorSeries {
  std::vector<double> eps;     // eps_K for K = 1..rungs
  std::vector<double> bounds;  // C / (2^{b_K} - 1)
  double c = 0.0;
};

inline QuantErrorSeries quant_error_series(const Tensor& z, const BitLadder& ladder) {
  check_unit_range("quant_error_series", z);
  const double l1 = l1_norm(z);
  if (l1 == 0.0) {
    throw std::invalid_argument("quant_error_series: z must not be all zero");
  }
  QuantErrorSeries out;
  out.c = static_cast<double>(z.size()) / l1;
  const BitDecomposition d = decompose(z, ladder);
  for (int k = 1; k <= ladder.rungs(); ++k) {
    out.eps.push_back(l1_norm(sub(z, d.reconstruct(k))) / l1);
    out.bounds.push_back(out.c * ladder.step(k - 1));
  }
  return out;
}

// ---- autodiff decomposition ----

// Offsets as graph nodes. Each D is straight-through, so the reconstruction's
// gradient to z is exactly 1 regardless of how many rungs are active, and the
// gate metrics are plain numbers with no gradient path.
struct BitDecompositionNodes {
  BitLadder ladder;
  ad::NodePtr base;
  std::vector<ad::NodePtr> offsets;
  std::vector<double> gate_metrics;
};

namespace qops {

// r = D(z - partial, s); gradient is up to z and -up to the partial.
inline ad::CustomOp residual_discretize_op(double s) {
  check_step("residual_discretize", s);
  return ad::register_custom_grad(
      "residual_discretize", 2,
      [s](const std::vector<Tensor>& in) {
        return discretize(sub(in[0], in[1]), s);
      },
      [](const std::vector<Tensor>&, const Tensor& up) {
        return std::vector<Tensor>{up, neg(up)};
      });
}

}  // namespace qops

inline BitDecompositionNodes decompose(const ad::NodePtr& z, const BitLadder& ladder) {
  check_unit_range("decompose", z->value());
  BitDecompositionNodes d{ladder, discretize_ste(z, ladder.step(0)), {}, {}};
  ad::NodePtr partial = d.base;
  for (int j = 1; j < ladder.rungs(); ++j) {
    d.gate_metrics.push_back(mean_abs(sub(z->value(), partial->value())));
    ad::NodePtr r = ad::apply(qops::residual_discretize_op(ladder.step(j)), {z, partial});
    partial = ad::add(partial, r);
    d.offsets.push_back(std::move(r));
  }
  return d;
}

}  // namespace sbs
