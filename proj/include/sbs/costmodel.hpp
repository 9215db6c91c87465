#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbs/autodiff.hpp"
#include "sbs/decomposition.hpp"
#include "sbs/gates.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

using BigInt = boost::multiprecision::cpp_int;

// Static description of one layer for cost accounting. Fractions are counted
// at group granularity throughout, so the soft and the hard cost agree even
// when the last group is short.
struct LayerSpec {
  std::string name;
  double macs = 0.0;          // multiply-accumulates at the reference input
  double weight_count = 0.0;  // parameters
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t group_size = 4;       // B
  double act_elements = 0.0;        // output activation entries, reference shape
  bool prunable = true;
  std::optional<int> fixed_bits;  // pins both widths and exempts from gating

  std::size_t groups() const {
    if (out_channels == 0 || group_size == 0) {
      throw std::invalid_argument("LayerSpec: '" + name +
                                  "' needs positive channels and group size");
    }
    return (out_channels + group_size - 1) / group_size;
  }

  void validate() const {
    if (name.empty()) throw std::invalid_argument("LayerSpec: empty name");
    if (macs < 0.0 || weight_count < 0.0 || act_elements < 0.0) {
      throw std::invalid_argument("LayerSpec: '" + name + "' has negative counts");
    }
    if (fixed_bits && (*fixed_bits < 1 || *fixed_bits > 32)) {
      throw std::invalid_argument("LayerSpec: '" + name + "' fixed_bits out of range");
    }
    groups();
  }
};

// Per-layer chosen operating point.
struct LayerConfig {
  std::string name;
  int w_bits = 8;
  int a_bits = 8;
  std::vector<int> kept_groups;  // sorted group indices
};

struct CompressionConfig {
  std::vector<LayerConfig> layers;
};

// ---- differentiable cost (Eq. 13 shape) ----

// Gates for one layer, as graph nodes. Empty vectors mean "no choice here":
// bit gates absent on fixed layers, prune gates absent on non-prunable ones.
struct LayerGateSet {
  std::vector<ad::NodePtr> w_bits;  // g_{b_j}, j = 2..K
  std::vector<ad::NodePtr> x_bits;
  std::vector<ad::NodePtr> prune;  // per group
};

namespace detail {

// b_1 + g_2 (b_2 - b_1 + g_3 (b_3 - b_2 + ...)): telescoped effective width.
inline ad::NodePtr telescoped_bits(const BitLadder& ladder,
                                   const std::vector<ad::NodePtr>& gates) {
  if (gates.size() + 1 != static_cast<std::size_t>(ladder.rungs())) {
    throw std::invalid_argument("telescoped_bits: gate count does not match ladder");
  }
  ad::NodePtr acc;
  for (std::size_t j = gates.size(); j-- > 0;) {
    const double delta =
        static_cast<double>(ladder.bit(static_cast<int>(j) + 1) - ladder.bit(static_cast<int>(j)));
    ad::NodePtr term = ad::constant(Tensor::scalar(delta), "bit_delta");
    if (acc) term = ad::add(term, acc);
    acc = ad::mul(gates[j], term);
  }
  ad::NodePtr base = ad::constant(Tensor::scalar(static_cast<double>(ladder.bit(0))));
  return acc ? ad::add(base, acc) : base;
}

}  // namespace detail

// Soft resource model: R = sum_l sum_c g_{c,b_1} (macs_l / G) tw_l ta_l, with
// tw/ta the telescoped widths. Differentiable through every gate.
inline ad::NodePtr gated_cost(const std::vector<LayerSpec>& layers,
                              const std::vector<LayerGateSet>& gates,
                              const BitLadder& ladder) {
  if (layers.size() != gates.size()) {
    throw std::invalid_argument("gated_cost: " + std::to_string(layers.size()) +
                                " layers vs " + std::to_string(gates.size()) +
                                " gate sets");
  }
  ad::NodePtr total = ad::constant(Tensor::scalar(0.0), "cost_zero");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& spec = layers[l];
    spec.validate();
    const double g_count = static_cast<double>(spec.groups());

    ad::NodePtr tw, ta;
    if (spec.fixed_bits) {
      if (!gates[l].w_bits.empty() || !gates[l].x_bits.empty()) {
        throw std::invalid_argument("gated_cost: fixed layer '" + spec.name +
                                    "' must not carry bit gates");
      }
      tw = ad::constant(Tensor::scalar(static_cast<double>(*spec.fixed_bits)));
      ta = tw;
    } else {
      tw = detail::telescoped_bits(ladder, gates[l].w_bits);
      ta = detail::telescoped_bits(ladder, gates[l].x_bits);
    }

    ad::NodePtr kept;
    if (!spec.prunable) {
      if (!gates[l].prune.empty()) {
        throw std::invalid_argument("gated_cost: non-prunable layer '" + spec.name +
                                    "' must not carry prune gates");
      }
      kept = ad::constant(Tensor::scalar(g_count));
    } else {
      if (gates[l].prune.size() != spec.groups()) {
        throw std::invalid_argument("gated_cost: layer '" + spec.name + "' expects " +
                                    std::to_string(spec.groups()) + " prune gates");
      }
      kept = ad::constant(Tensor::scalar(0.0));
      for (const auto& g : gates[l].prune) kept = ad::add(kept, g);
    }

    ad::NodePtr per_group = ad::mul(ad::mul(tw, ta),
                                    ad::constant(Tensor::scalar(spec.macs / g_count)));
    total = ad::add(total, ad::mul(kept, per_group));
  }
  return total;
}

// ---- hard cost and reporting ----

struct LayerCostRow {
  std::string name;
  int w_bits = 0;
  int a_bits = 0;
  double pruning_rate = 0.0;  // fraction of weights removed (in and out effects)
  double bops = 0.0;
  double memory_kb = 0.0;
};

struct CostReport {
  double bops = 0.0;
  double memory_kb = 0.0;
  double bop_ratio = 0.0;     // uncompressed 32-bit over compressed
  double memory_ratio = 0.0;
  std::vector<LayerCostRow> per_layer;
};

struct DiscreteCostOptions {
  // Kept-group fraction of the producing layer also shrinks the consumer's
  // input. Reporting keeps this on; the soft-vs-hard identity turns it off
  // because Eq. 13 has no cross-layer term.
  bool apply_in_fraction = true;
  int reference_bits = 32;
};

inline CostReport discrete_cost(const std::vector<LayerSpec>& layers,
                                const CompressionConfig& config,
                                const DiscreteCostOptions& opts = {}) {
  if (layers.size() != config.layers.size()) {
    throw std::invalid_argument("discrete_cost: " + std::to_string(layers.size()) +
                                " layers vs config with " +
                                std::to_string(config.layers.size()));
  }
  CostReport report;
  double ref_bops = 0.0, ref_mem = 0.0;
  double prev_kept = 1.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& spec = layers[l];
    spec.validate();
    const LayerConfig& lc = config.layers[l];
    if (lc.name != spec.name) {
      throw std::invalid_argument("discrete_cost: layer order mismatch, spec '" +
                                  spec.name + "' vs config '" + lc.name + "'");
    }
    const int wb = spec.fixed_bits ? *spec.fixed_bits : lc.w_bits;
    const int ab = spec.fixed_bits ? *spec.fixed_bits : lc.a_bits;
    if (wb < 1 || ab < 1) {
      throw std::invalid_argument("discrete_cost: layer '" + spec.name +
                                  "' has non-positive bitwidths");
    }
    const double g_count = static_cast<double>(spec.groups());
    double out_frac = 1.0;
    if (spec.prunable) {
      for (int c : lc.kept_groups) {
        if (c < 0 || static_cast<std::size_t>(c) >= spec.groups()) {
          throw std::invalid_argument("discrete_cost: layer '" + spec.name +
                                      "' keeps out-of-range group " +
                                      std::to_string(c));
        }
      }
      out_frac = static_cast<double>(lc.kept_groups.size()) / g_count;
    }
    const double in_frac = opts.apply_in_fraction ? prev_kept : 1.0;

    LayerCostRow row;
    row.name = spec.name;
    row.w_bits = wb;
    row.a_bits = ab;
    row.pruning_rate = 1.0 - out_frac * in_frac;
    row.bops = spec.macs * in_frac * out_frac * static_cast<double>(wb) *
               static_cast<double>(ab);
    const double w_bytes = spec.weight_count * in_frac * out_frac *
                           static_cast<double>(wb) / 8.0;
    const double a_bytes = spec.act_elements * out_frac * static_cast<double>(ab) / 8.0;
    row.memory_kb = (w_bytes + a_bytes) / 1024.0;

    report.bops += row.bops;
    report.memory_kb += row.memory_kb;
    report.per_layer.push_back(std::move(row));

    const double rb = static_cast<double>(opts.reference_bits);
    ref_bops += spec.macs * rb * rb;
    ref_mem += (spec.weight_count * rb / 8.0 + spec.act_elements * rb / 8.0) / 1024.0;

    prev_kept = out_frac;
  }
  report.bop_ratio = report.bops > 0.0 ? ref_bops / report.bops : 0.0;
  report.memory_ratio = report.memory_kb > 0.0 ? ref_mem / report.memory_kb : 0.0;
  return report;
}

// Joint choice count: K^2 bitwidth pairs per searchable layer, times the
// number of reachable pruning levels (one per kept-prefix size). Layers with
// pinned widths or no pruning contribute a factor of 1 for that part.
inline BigInt search_space_size(const std::vector<LayerSpec>& layers,
                                const BitLadder& ladder) {
  BigInt total = 1;
  const BigInt k2 = BigInt(ladder.rungs()) * BigInt(ladder.rungs());
  for (const LayerSpec& spec : layers) {
    spec.validate();
    if (!spec.fixed_bits) total *= k2;
    if (spec.prunable) total *= BigInt(static_cast<unsigned long long>(spec.groups()));
  }
  return total;
}

}  // namespace sbs
