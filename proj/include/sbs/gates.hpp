#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbs/autodiff.hpp"
#include "sbs/decomposition.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

// Hard step with H(0) = 1: a threshold sitting exactly on the metric keeps
// the gate open, which is what makes zero-initialized thresholds start from
// the uncompressed end of the search space.
inline double heaviside(double a) { return a >= 0.0 ? 1.0 : 0.0; }

inline double sigmoid_value(double a) { return 1.0 / (1.0 + std::exp(-a)); }

namespace qops {

// g = H(metric - alpha). Backward uses the sigmoid derivative at the same
// point: +S(1-S) toward the metric, -S(1-S) toward the threshold. The step
// itself has measure-zero derivative; this surrogate is the only gradient
// path a threshold ever gets.
inline const ad::CustomOp& step_gate_op() {
  static const ad::CustomOp op = ad::register_custom_grad(
      "step_gate", 2,
      [](const std::vector<Tensor>& in) {
        if (!in[0].is_scalar() || !in[1].is_scalar()) {
          throw std::invalid_argument("step_gate: metric and threshold must be scalars");
        }
        return Tensor::scalar(heaviside(in[0].item() - in[1].item()));
      },
      [](const std::vector<Tensor>& in, const Tensor& up) {
        const double s = sigmoid_value(in[0].item() - in[1].item());
        const double d = s * (1.0 - s) * up.item();
        return std::vector<Tensor>{Tensor::scalar(d), Tensor::scalar(-d)};
      });
  return op;
}

}  // namespace qops

inline ad::NodePtr step_gate(const ad::NodePtr& metric, const ad::NodePtr& alpha) {
  return ad::apply(qops::step_gate_op(), {metric, alpha});
}

// Groups of `group_size` consecutive output rows; the last group may be short.
struct GroupPartition {
  std::size_t total_rows = 0;
  std::size_t group_size = 0;

  GroupPartition(std::size_t rows, std::size_t size)
      : total_rows(rows), group_size(size) {
    if (rows == 0 || size == 0) {
      throw std::invalid_argument("GroupPartition: rows and group size must be positive");
    }
  }

  std::size_t count() const { return (total_rows + group_size - 1) / group_size; }

  std::pair<std::size_t, std::size_t> range(std::size_t c) const {
    if (c >= count()) {
      throw std::invalid_argument("GroupPartition: group index " + std::to_string(c) +
                                  " out of range for " + std::to_string(count()) +
                                  " groups");
    }
    const std::size_t r0 = c * group_size;
    return {r0, std::min(r0 + group_size, total_rows)};
  }
};

// Mean absolute weight per group of rows; the pruning saliency.
inline std::vector<double> group_prune_metrics(const Tensor& w,
                                               const GroupPartition& part) {
  if (w.rank() != 2 || w.rows() != part.total_rows) {
    throw std::invalid_argument("group_prune_metrics: weight shape " +
                                Tensor::shape_string(w.shape()) +
                                " does not match partition of " +
                                std::to_string(part.total_rows) + " rows");
  }
  std::vector<double> out;
  for (std::size_t c = 0; c < part.count(); ++c) {
    const auto [r0, r1] = part.range(c);
    double acc = 0.0;
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) acc += std::abs(w.at(i, j));
    }
    out.push_back(acc / static_cast<double>((r1 - r0) * w.cols()));
  }
  return out;
}

// One gate per rung beyond the first, driven by the decomposition's own
// error metrics. Metrics enter as constants: thresholds receive gradient
// through the step surrogate only, never back into the weights.
inline std::vector<ad::NodePtr> make_bit_gates(const std::vector<double>& metrics,
                                               const std::vector<ad::NodePtr>& alphas) {
  if (metrics.size() != alphas.size()) {
    throw std::invalid_argument("make_bit_gates: " + std::to_string(metrics.size()) +
                                " metrics vs " + std::to_string(alphas.size()) +
                                " thresholds");
  }
  std::vector<ad::NodePtr> gates;
  gates.reserve(metrics.size());
  for (std::size_t j = 0; j < metrics.size(); ++j) {
    gates.push_back(step_gate(ad::constant(Tensor::scalar(metrics[j])), alphas[j]));
  }
  return gates;
}

inline std::vector<ad::NodePtr> make_prune_gates(const std::vector<double>& metrics,
                                                 const ad::NodePtr& alpha) {
  std::vector<ad::NodePtr> gates;
  gates.reserve(metrics.size());
  for (double m : metrics) {
    gates.push_back(step_gate(ad::constant(Tensor::scalar(m)), alpha));
  }
  return gates;
}

// base + g_2 (r_2 + g_3 (r_3 + ... + g_K r_K)): an inactive gate removes every
// deeper offset from both the value and the gradient.
inline ad::NodePtr nested_gated_sum(const BitDecompositionNodes& d,
                                    const std::vector<ad::NodePtr>& bit_gates) {
  if (bit_gates.size() != d.offsets.size()) {
    throw std::invalid_argument("nested_gated_sum: " + std::to_string(bit_gates.size()) +
                                " gates vs " + std::to_string(d.offsets.size()) +
                                " offsets");
  }
  if (d.offsets.empty()) return d.base;
  ad::NodePtr inner = d.offsets.back();
  for (std::size_t j = d.offsets.size() - 1; j-- > 0;) {
    inner = ad::add(d.offsets[j], ad::mul(bit_gates[j + 1], inner));
  }
  return ad::add(d.base, ad::mul(bit_gates[0], inner));
}

// Activation path: bit gates only.
inline ad::NodePtr gated_activation(const BitDecompositionNodes& d,
                                    const std::vector<ad::NodePtr>& alphas) {
  return nested_gated_sum(d, make_bit_gates(d.gate_metrics, alphas));
}

// Weight path for one group, in normalized coordinates: the group's slice of
// the bit-gated reconstruction, multiplied by its prune gate (0-bit case).
inline ad::NodePtr gated_weight(const BitDecompositionNodes& d,
                                const std::vector<ad::NodePtr>& bit_gates,
                                const std::vector<ad::NodePtr>& prune_gates,
                                const GroupPartition& part, std::size_t c) {
  if (prune_gates.size() != part.count()) {
    throw std::invalid_argument("gated_weight: " + std::to_string(prune_gates.size()) +
                                " prune gates for " + std::to_string(part.count()) +
                                " groups");
  }
  const auto [r0, r1] = part.range(c);  // validates c
  ad::NodePtr full = nested_gated_sum(d, bit_gates);
  return ad::mul(prune_gates[c], ad::slice_rows(full, r0, r1));
}

// ---- hard extraction ----

struct GateState {
  std::vector<double> w_bits;  // g_{b_j}, j = 2..K
  std::vector<double> x_bits;
  std::vector<double> prune;  // per group
};

// Longest active prefix of bit gates on top of b_1. An inactive rung hides
// everything deeper even if a later gate would fire on its own.
inline int effective_bits(const BitLadder& ladder, const std::vector<double>& metrics,
                          const std::vector<double>& alphas) {
  if (metrics.size() + 1 != static_cast<std::size_t>(ladder.rungs()) ||
      alphas.size() != metrics.size()) {
    throw std::invalid_argument("effective_bits: rung count mismatch");
  }
  int bits = ladder.bit(0);
  for (std::size_t j = 0; j < metrics.size(); ++j) {
    if (heaviside(metrics[j] - alphas[j]) != 1.0) break;
    bits = ladder.bit(static_cast<int>(j) + 1);
  }
  return bits;
}

// Raw gate readout; may legitimately return an empty list. Keeping at least
// one group per layer is the trainer's policy, not the gate semantics.
inline std::vector<int> kept_groups(const std::vector<double>& prune_metrics,
                                    double alpha) {
  std::vector<int> kept;
  for (std::size_t c = 0; c < prune_metrics.size(); ++c) {
    if (heaviside(prune_metrics[c] - alpha) == 1.0) kept.push_back(static_cast<int>(c));
  }
  return kept;
}

}  // namespace sbs
