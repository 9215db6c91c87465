#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sbs/autodiff.hpp"
#include "sbs/costmodel.hpp"
#include "sbs/decomposition.hpp"
#include "sbs/gates.hpp"
#include "sbs/quantizer.hpp"
#include "sbs/rng.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

// Which half of the alternating schedule a parameter belongs to. Weights and
// biases move in both halves; quantization parameters move only in their own.
enum class ParamFamily { shared, weights, activations };

struct Param {
  std::string name;
  ParamFamily family = ParamFamily::shared;
  Tensor value;
  Tensor velocity;  // optimizer momentum slot
};

constexpr int kFloatBits = 32;  // sentinel: skip quantization entirely

struct MlpSpec {
  std::vector<std::size_t> dims;  // layer widths, input first
  std::size_t group_size = 2;
  BitLadder ladder = BitLadder::default_ladder();
  bool weight_normalization = false;
  std::optional<int> head_bits = 8;  // pins the classifier layer's widths

  std::size_t layer_count() const { return dims.empty() ? 0 : dims.size() - 1; }

  bool pinned(std::size_t l) const {
    return head_bits.has_value() && l + 1 == layer_count();
  }

  void validate() const {
    if (dims.size() < 2) throw std::invalid_argument("MlpSpec: needs at least one layer");
    for (std::size_t d : dims) {
      if (d == 0) throw std::invalid_argument("MlpSpec: zero-width layer");
    }
    if (group_size == 0) throw std::invalid_argument("MlpSpec: zero group size");
    if (head_bits && (*head_bits < 1 || *head_bits > 32)) {
      throw std::invalid_argument("MlpSpec: head_bits out of range");
    }
  }

  static std::string layer_name(std::size_t l) { return "fc" + std::to_string(l + 1); }

  // MACs and memory at a one-sample reference; the classifier is never pruned.
  std::vector<LayerSpec> cost_layers() const {
    validate();
    std::vector<LayerSpec> out;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      LayerSpec s;
      s.name = layer_name(l);
      s.in_channels = dims[l];
      s.out_channels = dims[l + 1];
      s.macs = static_cast<double>(dims[l] * dims[l + 1]);
      s.weight_count = s.macs;
      s.act_elements = static_cast<double>(dims[l + 1]);
      s.group_size = group_size;
      s.prunable = l + 1 < layer_count();
      if (pinned(l)) s.fixed_bits = *head_bits;
      out.push_back(std::move(s));
    }
    return out;
  }
};

// Hard 0/1 values the gates took in one forward pass.
struct LayerGateValues {
  std::vector<double> w_gates;
  std::vector<double> x_gates;
  std::vector<double> prune_gates;
};

namespace detail {

// Zero-mean unit-variance reshaping of a weight tensor, differentiable.
inline ad::NodePtr standardize(const ad::NodePtr& w) {
  ad::NodePtr centered = ad::sub(w, ad::mean(w));
  ad::NodePtr var = ad::mean(ad::mul(centered, centered));
  return ad::div(centered, ad::sqrt(ad::add_scalar(var, 1e-8)));
}

inline Tensor standardize_value(const Tensor& w) {
  const double mu = mean(w);
  Tensor centered = map(w, [mu](double v) { return v - mu; });
  double var = 0.0;
  for (std::size_t i = 0; i < centered.size(); ++i) var += centered[i] * centered[i];
  var /= static_cast<double>(centered.size());
  const double sd = std::sqrt(var + 1e-8);
  return map(centered, [sd](double v) { return v / sd; });
}

}  // namespace detail

// A multilayer perceptron whose every layer can run in one of three regimes:
// float, direct fixed-width quantization, or gate-searched quantization with
// group pruning. One forward pass builds one fresh graph over the stored
// parameter tensors.
class QuantMlp {
 public:
  QuantMlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    const int rungs = spec_.ladder.rungs();
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      const std::size_t in = spec_.dims[l], out = spec_.dims[l + 1];
      const std::string base = MlpSpec::layer_name(l);
      Tensor w = Tensor::zeros({out, in});
      const double scale = std::sqrt(2.0 / static_cast<double>(in));
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal() * scale;
      add_param(base + ".w", ParamFamily::shared, std::move(w));
      add_param(base + ".b", ParamFamily::shared, Tensor::zeros({out}));
      // Trainable clipping intervals start at 1 on both sides.
      add_param(base + ".v_w", ParamFamily::weights, Tensor::scalar(1.0));
      add_param(base + ".v_x", ParamFamily::activations, Tensor::scalar(1.0));
      if (!spec_.pinned(l)) {
        add_param(base + ".alpha_prune", ParamFamily::weights, Tensor::scalar(0.0));
        for (int j = 1; j < rungs; ++j) {
          const std::string rung = std::to_string(spec_.ladder.bit(j));
          add_param(base + ".alpha_w" + rung, ParamFamily::weights, Tensor::scalar(0.0));
          add_param(base + ".alpha_x" + rung, ParamFamily::activations,
                    Tensor::scalar(0.0));
        }
      }
    }
  }

  const MlpSpec& spec() const { return spec_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  Param& param(const std::string& name) {
    for (Param& p : params_) {
      if (p.name == name) return p;
    }
    throw std::invalid_argument("param: no parameter named '" + name + "'");
  }

  const Param& param(const std::string& name) const {
    for (const Param& p : params_) {
      if (p.name == name) return p;
    }
    throw std::invalid_argument("param: no parameter named '" + name + "'");
  }

  GroupPartition partition(std::size_t l) const {
    return GroupPartition(spec_.dims.at(l + 1), spec_.group_size);
  }

  struct Build {
    ad::NodePtr logits;
    ad::NodePtr cost;  // gated resource model; null outside gated builds
    std::vector<std::pair<Param*, ad::NodePtr>> bound;
    std::vector<LayerGateValues> gates;
  };

  Build forward_float(const Tensor& x) {
    return forward_fixed(x, float_config());
  }

  // Direct quantization at per-layer fixed widths; pruned groups are masked
  // out of the forward value and of every gradient.
  Build forward_fixed(const Tensor& x, const CompressionConfig& cfg,
                      ParamFamily active = ParamFamily::shared) {
    check_config(cfg);
    Build out;
    ad::NodePtr h = ad::constant(x, "input");
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      const LayerConfig& lc = cfg.layers[l];
      // The pin overrides searched widths, never the float sentinel: a 32-bit
      // entry means "run this layer in full precision", pinned or not.
      const int wb = lc.w_bits == kFloatBits || !spec_.pinned(l) ? lc.w_bits
                                                                 : *spec_.head_bits;
      const int ab = lc.a_bits == kFloatBits || !spec_.pinned(l) ? lc.a_bits
                                                                 : *spec_.head_bits;

      ad::NodePtr w = bind(out, layer_param(l, ".w"), active);
      ad::NodePtr b = bind(out, layer_param(l, ".b"), active);

      if (ab != kFloatBits) {
        h = quantize_act(h, bind(out, layer_param(l, ".v_x"), active), ab);
      }
      ad::NodePtr qw = w;
      if (wb != kFloatBits) {
        if (spec_.weight_normalization) qw = detail::standardize(qw);
        qw = quantize_wt(qw, bind(out, layer_param(l, ".v_w"), active), wb);
      }
      const GroupPartition part = partition(l);
      if (prunable(l) && lc.kept_groups.size() < part.count()) {
        qw = ad::mul(qw, ad::constant(row_mask(l, lc.kept_groups), "prune_mask"));
        b = ad::mul(b, ad::constant(bias_mask(l, lc.kept_groups), "prune_mask"));
      }
      h = ad::linear(h, qw, b);
      if (l + 1 < spec_.layer_count()) h = ad::relu(h);
    }
    out.logits = h;
    return out;
  }

  // Search-time forward: decomposition plus bit/prune gates, and the gated
  // resource model built from the very same gate nodes.
  Build forward_gated(const Tensor& x, ParamFamily active = ParamFamily::shared) {
    Build out;
    std::vector<LayerGateSet> gate_sets(spec_.layer_count());
    ad::NodePtr h = ad::constant(x, "input");
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      ad::NodePtr w = bind(out, layer_param(l, ".w"), active);
      ad::NodePtr b = bind(out, layer_param(l, ".b"), active);
      ad::NodePtr vw = bind(out, layer_param(l, ".v_w"), active);
      ad::NodePtr vx = bind(out, layer_param(l, ".v_x"), active);
      LayerGateValues vals;

      if (spec_.pinned(l)) {
        h = quantize_act(h, vx, *spec_.head_bits);
        ad::NodePtr qw = w;
        if (spec_.weight_normalization) qw = detail::standardize(qw);
        qw = quantize_wt(qw, vw, *spec_.head_bits);
        h = ad::linear(h, qw, b);
      } else {
        // Activation side: residual ladder gated by the x thresholds.
        BitDecompositionNodes dx = decompose(normalize_act(h, vx), spec_.ladder);
        std::vector<ad::NodePtr> x_gates =
            bit_gates_for(out, l, "alpha_x", dx.gate_metrics, active);
        h = ad::mul(nested_gated_sum(dx, x_gates), vx);

        // Weight side: same ladder, plus per-group pruning on the
        // denormalized tensor so a closed gate yields exactly zero weights.
        ad::NodePtr w_used = spec_.weight_normalization ? detail::standardize(w) : w;
        BitDecompositionNodes dw = decompose(normalize_wt(w_used, vw), spec_.ladder);
        std::vector<ad::NodePtr> w_gates =
            bit_gates_for(out, l, "alpha_w", dw.gate_metrics, active);
        ad::NodePtr qw = ad::mul(
            ad::add_scalar(ad::mul_scalar(nested_gated_sum(dw, w_gates), 2.0), -1.0),
            vw);

        const GroupPartition part = partition(l);
        const std::vector<double> metrics = group_prune_metrics(w_used->value(), part);
        ad::NodePtr alpha_p = bind(out, layer_param(l, ".alpha_prune"), active);
        std::vector<ad::NodePtr> prune_gates;
        std::vector<ad::NodePtr> rows;
        for (std::size_t c = 0; c < part.count(); ++c) {
          ad::NodePtr g =
              step_gate(ad::constant(Tensor::scalar(metrics[c]), "prune_metric"), alpha_p);
          const auto [r0, r1] = part.range(c);
          rows.push_back(ad::mul(g, ad::slice_rows(qw, r0, r1)));
          prune_gates.push_back(std::move(g));
        }
        h = ad::linear(h, ad::concat_rows(rows), b);

        for (const auto& g : w_gates) vals.w_gates.push_back(g->value().item());
        for (const auto& g : x_gates) vals.x_gates.push_back(g->value().item());
        for (const auto& g : prune_gates) vals.prune_gates.push_back(g->value().item());
        gate_sets[l] = LayerGateSet{std::move(w_gates), std::move(x_gates),
                                    std::move(prune_gates)};
      }
      if (l + 1 < spec_.layer_count()) h = ad::relu(h);
      out.gates.push_back(std::move(vals));
    }
    out.logits = h;
    out.cost = gated_cost(spec_.cost_layers(), gate_sets, spec_.ladder);
    return out;
  }

  // Hard configuration read off the current gates. A layer that would lose
  // every group keeps its strongest one instead.
  CompressionConfig extract_config(const Tensor& calibration) {
    Build b = forward_gated(calibration, ParamFamily::shared);
    CompressionConfig cfg;
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      LayerConfig lc;
      lc.name = MlpSpec::layer_name(l);
      const GroupPartition part = partition(l);
      if (spec_.pinned(l)) {
        lc.w_bits = *spec_.head_bits;
        lc.a_bits = *spec_.head_bits;
        for (std::size_t c = 0; c < part.count(); ++c) {
          lc.kept_groups.push_back(static_cast<int>(c));
        }
      } else {
        const LayerGateValues& g = b.gates[l];
        lc.w_bits = prefix_bits(g.w_gates);
        lc.a_bits = prefix_bits(g.x_gates);
        for (std::size_t c = 0; c < part.count(); ++c) {
          if (g.prune_gates[c] == 1.0) lc.kept_groups.push_back(static_cast<int>(c));
        }
        if (lc.kept_groups.empty()) {
          Tensor w = layer_param(l, ".w").value;
          if (spec_.weight_normalization) w = detail::standardize_value(w);
          const std::vector<double> metrics = group_prune_metrics(w, part);
          std::size_t best = 0;
          for (std::size_t c = 1; c < metrics.size(); ++c) {
            if (metrics[c] > metrics[best]) best = c;
          }
          lc.kept_groups.push_back(static_cast<int>(best));
        }
      }
      cfg.layers.push_back(std::move(lc));
    }
    return cfg;
  }

  // Permanently zero the rows a config prunes; fine-tuning then masks their
  // gradients so they stay zero.
  void zero_pruned_rows(const CompressionConfig& cfg) {
    check_config(cfg);
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      if (!prunable(l)) continue;
      const Tensor mask = row_mask(l, cfg.layers[l].kept_groups);
      const Tensor bmask = bias_mask(l, cfg.layers[l].kept_groups);
      Tensor& w = layer_param(l, ".w").value;
      Tensor& b = layer_param(l, ".b").value;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] *= mask[i];
      for (std::size_t i = 0; i < b.size(); ++i) b[i] *= bmask[i];
    }
  }

  // All-float identity configuration.
  CompressionConfig float_config() const {
    CompressionConfig cfg;
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      LayerConfig lc;
      lc.name = MlpSpec::layer_name(l);
      lc.w_bits = kFloatBits;
      lc.a_bits = kFloatBits;
      const GroupPartition part = partition(l);
      for (std::size_t c = 0; c < part.count(); ++c) {
        lc.kept_groups.push_back(static_cast<int>(c));
      }
      cfg.layers.push_back(std::move(lc));
    }
    return cfg;
  }

 private:
  void add_param(std::string name, ParamFamily family, Tensor value) {
    Param p;
    p.name = std::move(name);
    p.family = family;
    p.velocity = Tensor::zeros(value.shape());
    p.value = std::move(value);
    params_.push_back(std::move(p));
  }

  bool prunable(std::size_t l) const { return l + 1 < spec_.layer_count(); }

  Param& layer_param(std::size_t l, const std::string& suffix) {
    return param(MlpSpec::layer_name(l) + suffix);
  }

  static bool trainable(ParamFamily family, ParamFamily active) {
    return active == ParamFamily::shared || family == ParamFamily::shared ||
           family == active;
  }

  ad::NodePtr bind(Build& out, Param& p, ParamFamily active) {
    if (!trainable(p.family, active)) return ad::constant(p.value, p.name);
    ad::NodePtr node = ad::parameter(p.value, p.name);
    out.bound.emplace_back(&p, node);
    return node;
  }

  std::vector<ad::NodePtr> bit_gates_for(Build& out, std::size_t l,
                                         const std::string& prefix,
                                         const std::vector<double>& metrics,
                                         ParamFamily active) {
    std::vector<ad::NodePtr> gates;
    for (int j = 1; j < spec_.ladder.rungs(); ++j) {
      Param& alpha =
          layer_param(l, "." + prefix + std::to_string(spec_.ladder.bit(j)));
      gates.push_back(step_gate(
          ad::constant(Tensor::scalar(metrics[static_cast<std::size_t>(j - 1)]),
                       "gate_metric"),
          bind(out, alpha, active)));
    }
    return gates;
  }

  int prefix_bits(const std::vector<double>& gates) const {
    int idx = 0;
    for (std::size_t j = 0; j < gates.size(); ++j) {
      if (gates[j] != 1.0) break;
      idx = static_cast<int>(j) + 1;
    }
    return spec_.ladder.bit(idx);
  }

  Tensor row_mask(std::size_t l, const std::vector<int>& kept) {
    const GroupPartition part = partition(l);
    Tensor mask = Tensor::zeros({spec_.dims[l + 1], spec_.dims[l]});
    for (int c : kept) {
      const auto [r0, r1] = part.range(static_cast<std::size_t>(c));
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t j = 0; j < spec_.dims[l]; ++j) mask.at(r, j) = 1.0;
      }
    }
    return mask;
  }

  Tensor bias_mask(std::size_t l, const std::vector<int>& kept) {
    const GroupPartition part = partition(l);
    Tensor mask = Tensor::zeros({spec_.dims[l + 1]});
    for (int c : kept) {
      const auto [r0, r1] = part.range(static_cast<std::size_t>(c));
      for (std::size_t r = r0; r < r1; ++r) mask[r] = 1.0;
    }
    return mask;
  }

  void check_config(const CompressionConfig& cfg) const {
    if (cfg.layers.size() != spec_.layer_count()) {
      throw std::invalid_argument("forward_fixed: config has " +
                                  std::to_string(cfg.layers.size()) +
                                  " layers, model has " +
                                  std::to_string(spec_.layer_count()));
    }
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      const LayerConfig& lc = cfg.layers[l];
      if (lc.name != MlpSpec::layer_name(l)) {
        throw std::invalid_argument("forward_fixed: unknown layer '" + lc.name + "'");
      }
      if (spec_.pinned(l)) {
        if ((lc.w_bits != kFloatBits && lc.w_bits != *spec_.head_bits) ||
            (lc.a_bits != kFloatBits && lc.a_bits != *spec_.head_bits)) {
          throw std::invalid_argument("forward_fixed: pinned layer '" + lc.name +
                                      "' only runs at " +
                                      std::to_string(*spec_.head_bits) +
                                      " bits or in float");
        }
      } else {
        check_width("w_bits", lc.w_bits);
        check_width("a_bits", lc.a_bits);
      }
      if (l + 1 < spec_.layer_count()) {
        const GroupPartition part = GroupPartition(spec_.dims[l + 1], spec_.group_size);
        if (lc.kept_groups.empty()) {
          throw std::invalid_argument("forward_fixed: layer '" + lc.name +
                                      "' keeps no groups");
        }
        for (int c : lc.kept_groups) {
          if (c < 0 || static_cast<std::size_t>(c) >= part.count()) {
            throw std::invalid_argument("forward_fixed: layer '" + lc.name +
                                        "' keeps out-of-range group " +
                                        std::to_string(c));
          }
        }
      }
    }
  }

  void check_width(const std::string& field, int bits) const {
    if (bits == kFloatBits) return;
    for (int j = 0; j < spec_.ladder.rungs(); ++j) {
      if (spec_.ladder.bit(j) == bits) return;
    }
    throw std::invalid_argument("forward_fixed: " + field + " " +
                                std::to_string(bits) + " is not on the ladder");
  }

  MlpSpec spec_;
  std::vector<Param> params_;
};

}  // namespace sbs
