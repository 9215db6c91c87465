#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "sbs/autodiff.hpp"
#include "sbs/costmodel.hpp"
#include "sbs/data.hpp"
#include "sbs/decomposition.hpp"
#include "sbs/gates.hpp"
#include "sbs/model.hpp"
#include "sbs/quantizer.hpp"
#include "sbs/rng.hpp"
#include "sbs/tensor.hpp"
#include "sbs/trainer.hpp"

namespace sbs {

// ---- multi-path baseline ----

// w_D = sum_i p_i D(z, s_i) with p = softmax(path_logits): every ladder rung
// is discretized in full and mixed by path probability. Each path runs
// straight-through, so z receives sum_i p_i of the upstream gradient while
// the logits see the mixture through the softmax alone.
inline ad::NodePtr multipath_quantized_weight(const ad::NodePtr& z,
                                              const BitLadder& ladder,
                                              const ad::NodePtr& path_logits) {
  check_unit_range("multipath_quantized_weight", z->value());
  const Tensor& lv = path_logits->value();
  if (lv.rank() != 1 || lv.size() != static_cast<std::size_t>(ladder.rungs())) {
    throw std::invalid_argument(
        "multipath_quantized_weight: want " + std::to_string(ladder.rungs()) +
        " path logits, got " + Tensor::shape_string(lv.shape()));
  }
  ad::NodePtr p = ad::softmax(path_logits);
  ad::NodePtr mix;
  for (int i = 0; i < ladder.rungs(); ++i) {
    ad::NodePtr term = ad::mul(ad::index(p, static_cast<std::size_t>(i)),
                               discretize_ste(z, ladder.step(i)));
    mix = mix ? ad::add(mix, term) : std::move(term);
  }
  return mix;
}

// ---- single-path vs multi-path regression (Proposition 1 measurement) ----

// One seed's training traces. Losses are the closed-form expectation
// ||w_eff - w*||^2 + noise^2 (x has identity covariance), recorded at every
// step's forward plus once more at the trained parameters.
struct Prop1Run {
  std::uint64_t seed = 0;
  std::vector<double> single_loss;
  std::vector<double> multi_loss;
  double single_final = 0.0;
  double multi_final = 0.0;
  double relative_gap = 0.0;  // |single - multi| / multi
};

struct Prop1Record {
  std::vector<Prop1Run> runs;
  double max_relative_gap = 0.0;
  // Per training step, measured off the graphs each scheme actually builds:
  // the residual rungs of the shared ladder vs one full discretization per
  // maintained path.
  int single_discretizations_per_step = 0;
  int multi_discretizations_per_step = 0;
  std::size_t single_param_count = 0;  // d weights + K-1 thresholds
  std::size_t multi_param_count = 0;   // d weights + K path logits
};

namespace detail {

inline double expected_square_loss(const Tensor& w_eff, const Tensor& w_star,
                                   double noise_std) {
  if (!w_eff.same_shape(w_star)) {
    throw std::invalid_argument("expected_square_loss: weight shape mismatch");
  }
  double e = noise_std * noise_std;
  for (std::size_t i = 0; i < w_eff.size(); ++i) {
    const double d = w_eff[i] - w_star[i];
    e += d * d;
  }
  return e;
}

inline void descend(Tensor& value, const ad::NodePtr& node,
                    const ad::Gradients& grads, double lr) {
  const Tensor* g = grads.find(node.get());
  if (!g) return;
  for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * (*g)[i];
}

struct Prop1Trace {
  std::vector<double> expected_loss;
  int discretizations_per_step = 0;
  std::size_t param_count = 0;
};

// Full-batch gradient descent on the empirical squared error; the trace
// records the closed-form expected loss of the effective weights.
template <typename BuildEffectiveWeight, typename DescendExtras>
Prop1Trace train_regressor(const RegressionTask& task, int steps, double lr,
                           const BuildEffectiveWeight& build,
                           const DescendExtras& descend_extras) {
  Prop1Trace trace;
  ad::NodePtr xn = ad::constant(task.x, "x");
  ad::NodePtr yn = ad::constant(task.y, "y");
  ad::NodePtr bias = ad::constant(Tensor::zeros({1}), "b");
  for (int t = 0; t <= steps; ++t) {
    ad::NodePtr w_eff = build(trace);
    trace.expected_loss.push_back(
        expected_square_loss(w_eff->value(), task.w_star, task.noise_std));
    if (t == steps) break;  // last forward only reads off the trained state
    ad::NodePtr err = ad::sub(ad::linear(xn, w_eff, bias), yn);
    ad::Gradients grads = ad::backward(ad::mean(ad::mul(err, err)));
    descend_extras(grads, lr);
  }
  return trace;
}

inline Prop1Trace train_single_path(const RegressionTask& task, const Tensor& w0,
                                    const BitLadder& ladder, int steps, double lr) {
  Tensor w = w0;
  std::vector<Tensor> alphas(static_cast<std::size_t>(ladder.rungs() - 1),
                             Tensor::scalar(0.0));
  ad::NodePtr vn = ad::constant(Tensor::scalar(1.0), "v_w");
  ad::NodePtr wn;
  std::vector<ad::NodePtr> alpha_nodes;
  auto build = [&](Prop1Trace& trace) {
    wn = ad::parameter(w, "w");
    alpha_nodes.clear();
    for (Tensor& a : alphas) alpha_nodes.push_back(ad::parameter(a, "alpha"));
    BitDecompositionNodes dec = decompose(normalize_wt(wn, vn), ladder);
    trace.discretizations_per_step = static_cast<int>(dec.offsets.size());
    ad::NodePtr zq =
        nested_gated_sum(dec, make_bit_gates(dec.gate_metrics, alpha_nodes));
    return ad::mul(ad::add_scalar(ad::mul_scalar(zq, 2.0), -1.0), vn);
  };
  auto step = [&](const ad::Gradients& grads, double rate) {
    descend(w, wn, grads, rate);
    for (std::size_t j = 0; j < alphas.size(); ++j) {
      descend(alphas[j], alpha_nodes[j], grads, rate);
    }
  };
  Prop1Trace trace = train_regressor(task, steps, lr, build, step);
  trace.param_count = w.size() + alphas.size();
  return trace;
}

inline Prop1Trace train_multi_path(const RegressionTask& task, const Tensor& w0,
                                   const BitLadder& ladder, int steps, double lr) {
  Tensor w = w0;
  Tensor logits = Tensor::zeros({static_cast<std::size_t>(ladder.rungs())});
  ad::NodePtr vn = ad::constant(Tensor::scalar(1.0), "v_w");
  ad::NodePtr wn, ln;
  auto build = [&](Prop1Trace& trace) {
    trace.discretizations_per_step = ladder.rungs();
    wn = ad::parameter(w, "w");
    ln = ad::parameter(logits, "path_logits");
    ad::NodePtr zq = multipath_quantized_weight(normalize_wt(wn, vn), ladder, ln);
    return ad::mul(ad::add_scalar(ad::mul_scalar(zq, 2.0), -1.0), vn);
  };
  auto step = [&](const ad::Gradients& grads, double rate) {
    descend(w, wn, grads, rate);
    descend(logits, ln, grads, rate);
  };
  Prop1Trace trace = train_regressor(task, steps, lr, build, step);
  trace.param_count = w.size() + logits.size();
  return trace;
}

}  // namespace detail

// Trains both schemes from a shared per-seed initialization and reports the
// expected-loss trajectories, final gaps, and per-step bookkeeping.
inline Prop1Record run_prop1_experiment(
    const RegressionTask& task, int steps, const std::vector<std::uint64_t>& seeds,
    const BitLadder& ladder = BitLadder::default_ladder(), double lr = 0.1) {
  if (steps <= 0) {
    throw std::invalid_argument("run_prop1_experiment: steps must be positive");
  }
  if (seeds.empty()) {
    throw std::invalid_argument("run_prop1_experiment: no seeds");
  }
  Prop1Record rec;
  for (std::uint64_t seed : seeds) {
    Rng rng(seed);
    Tensor w0 = Tensor::zeros({1, task.w_star.cols()});
    for (std::size_t i = 0; i < w0.size(); ++i) w0[i] = rng.uniform();
    detail::Prop1Trace s = detail::train_single_path(task, w0, ladder, steps, lr);
    detail::Prop1Trace m = detail::train_multi_path(task, w0, ladder, steps, lr);
    Prop1Run run;
    run.seed = seed;
    run.single_loss = std::move(s.expected_loss);
    run.multi_loss = std::move(m.expected_loss);
    run.single_final = run.single_loss.back();
    run.multi_final = run.multi_loss.back();
    run.relative_gap = std::abs(run.single_final - run.multi_final) /
                       std::max(std::abs(run.multi_final), 1e-12);
    rec.max_relative_gap = std::max(rec.max_relative_gap, run.relative_gap);
    rec.single_discretizations_per_step = s.discretizations_per_step;
    rec.multi_discretizations_per_step = m.discretizations_per_step;
    rec.single_param_count = s.param_count;
    rec.multi_param_count = m.param_count;
    rec.runs.push_back(std::move(run));
  }
  return rec;
}

// ---- brute-force configuration oracle ----

struct OracleOptions {
  int finetune_steps = 50;  // full-batch gradient steps per configuration
  double lr = 0.05;
  std::size_t jobs = 1;
  std::size_t max_configs = 100000;
};

struct OracleEntry {
  CompressionConfig config;
  double objective = 0.0;  // CE after the finetune budget + lambda log R
  double ce = 0.0;
  double resource = 0.0;  // R at the hard gates, same formula the search sees
  double bops = 0.0;      // discrete BOPs, the first tiebreak
};

// Lexicographic order on (w_bits, a_bits, kept_groups) per layer.
inline bool config_precedes(const CompressionConfig& a, const CompressionConfig& b) {
  if (a.layers.size() != b.layers.size()) {
    throw std::invalid_argument("config_precedes: layer count mismatch");
  }
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const LayerConfig& x = a.layers[l];
    const LayerConfig& y = b.layers[l];
    if (x.w_bits != y.w_bits) return x.w_bits < y.w_bits;
    if (x.a_bits != y.a_bits) return x.a_bits < y.a_bits;
    if (x.kept_groups != y.kept_groups) return x.kept_groups < y.kept_groups;
  }
  return false;
}

namespace detail {

inline void check_on_ladder(const char* fn, const BitLadder& ladder, int bits,
                            const std::string& layer) {
  for (int j = 0; j < ladder.rungs(); ++j) {
    if (ladder.bit(j) == bits) return;
  }
  throw std::invalid_argument(std::string(fn) + ": layer '" + layer + "' uses " +
                              std::to_string(bits) + " bits, not on the ladder");
}

// Eq-13-style resource of a hard configuration: constant gates through the
// same formula the soft search optimizes, so soft and hard objectives agree.
inline double hard_resource(const std::vector<LayerSpec>& layers,
                            const CompressionConfig& cfg, const BitLadder& ladder) {
  if (layers.size() != cfg.layers.size()) {
    throw std::invalid_argument("hard_resource: layer count mismatch");
  }
  std::vector<LayerGateSet> sets(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].fixed_bits) continue;
    const LayerConfig& lc = cfg.layers[l];
    check_on_ladder("hard_resource", ladder, lc.w_bits, layers[l].name);
    check_on_ladder("hard_resource", ladder, lc.a_bits, layers[l].name);
    auto prefix = [&](int bits) {
      std::vector<ad::NodePtr> gates;
      for (int j = 1; j < ladder.rungs(); ++j) {
        gates.push_back(ad::constant(
            Tensor::scalar(ladder.bit(j) <= bits ? 1.0 : 0.0), "hard_gate"));
      }
      return gates;
    };
    sets[l].w_bits = prefix(lc.w_bits);
    sets[l].x_bits = prefix(lc.a_bits);
    if (layers[l].prunable) {
      const std::size_t groups = layers[l].groups();
      for (std::size_t c = 0; c < groups; ++c) {
        const bool kept =
            std::find(lc.kept_groups.begin(), lc.kept_groups.end(),
                      static_cast<int>(c)) != lc.kept_groups.end();
        sets[l].prune.push_back(
            ad::constant(Tensor::scalar(kept ? 1.0 : 0.0), "hard_gate"));
      }
    }
  }
  return gated_cost(layers, sets, ladder)->value().item();
}

// Short deterministic fine-tune: full batch, no momentum, no shuffling.
inline double oracle_finetuned_ce(QuantMlp model, const Dataset& data,
                                  const CompressionConfig& cfg,
                                  const OracleOptions& opts) {
  model.zero_pruned_rows(cfg);
  SgdOptimizer opt(opts.lr, 0.0, false);
  for (int t = 0; t < opts.finetune_steps; ++t) {
    QuantMlp::Build b = model.forward_fixed(data.x, cfg);
    opt.step(b.bound, ad::backward(ad::cross_entropy_logits(b.logits, data.y)));
  }
  QuantMlp::Build b = model.forward_fixed(data.x, cfg);
  return ad::cross_entropy_logits(b.logits, data.y)->value().item();
}

// All hard configurations of the model: per searchable layer every ladder
// pair, crossed with keep-the-top-g groups under the gates' own |w| metric.
// A single shared threshold can only ever keep such a metric prefix, so this
// family covers every extractable pruning decision.
inline std::vector<CompressionConfig> enumerate_configs(const QuantMlp& model) {
  const MlpSpec& spec = model.spec();
  const BitLadder& ladder = spec.ladder;
  std::vector<std::vector<LayerConfig>> per_layer;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    std::vector<LayerConfig> options;
    const std::string name = MlpSpec::layer_name(l);
    const GroupPartition part(spec.dims[l + 1], spec.group_size);
    std::vector<int> all_groups;
    for (std::size_t c = 0; c < part.count(); ++c) {
      all_groups.push_back(static_cast<int>(c));
    }
    if (spec.pinned(l)) {
      LayerConfig lc;
      lc.name = name;
      lc.w_bits = *spec.head_bits;
      lc.a_bits = *spec.head_bits;
      lc.kept_groups = all_groups;
      options.push_back(std::move(lc));
    } else {
      std::vector<std::vector<int>> kept_sets;
      if (l + 1 < spec.layer_count()) {
        Tensor w = model.param(name + ".w").value;
        if (spec.weight_normalization) w = detail::standardize_value(w);
        const std::vector<double> metrics = group_prune_metrics(w, part);
        std::vector<int> order = all_groups;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
          return metrics[static_cast<std::size_t>(a)] >
                 metrics[static_cast<std::size_t>(b)];
        });
        for (std::size_t g = 1; g <= order.size(); ++g) {
          std::vector<int> kept(order.begin(),
                                order.begin() + static_cast<std::ptrdiff_t>(g));
          std::sort(kept.begin(), kept.end());
          kept_sets.push_back(std::move(kept));
        }
      } else {
        kept_sets.push_back(all_groups);
      }
      for (int wi = 0; wi < ladder.rungs(); ++wi) {
        for (int ai = 0; ai < ladder.rungs(); ++ai) {
          for (const std::vector<int>& kept : kept_sets) {
            LayerConfig lc;
            lc.name = name;
            lc.w_bits = ladder.bit(wi);
            lc.a_bits = ladder.bit(ai);
            lc.kept_groups = kept;
            options.push_back(std::move(lc));
          }
        }
      }
    }
    per_layer.push_back(std::move(options));
  }

  std::vector<CompressionConfig> configs;
  CompressionConfig current;
  current.layers.resize(per_layer.size());
  const std::function<void(std::size_t)> expand = [&](std::size_t l) {
    if (l == per_layer.size()) {
      configs.push_back(current);
      return;
    }
    for (const LayerConfig& lc : per_layer[l]) {
      current.layers[l] = lc;
      expand(l + 1);
    }
  };
  expand(0);
  return configs;
}

}  // namespace detail

// Objective of one hard configuration under the oracle protocol: a short
// fine-tune from the given parameters, then CE + lambda log R. The model is
// copied; the caller's parameters are untouched.
inline OracleEntry oracle_objective(const QuantMlp& model, const Dataset& data,
                                    const CompressionConfig& cfg, double lambda,
                                    const OracleOptions& opts = {}) {
  const std::vector<LayerSpec> layers = model.spec().cost_layers();
  OracleEntry e;
  e.config = cfg;
  e.ce = detail::oracle_finetuned_ce(model, data, cfg, opts);
  e.resource = detail::hard_resource(layers, cfg, model.spec().ladder);
  e.bops = discrete_cost(layers, cfg).bops;
  e.objective = objective(e.ce, e.resource, lambda);
  return e;
}

// Evaluates every configuration and ranks them: objective ascending, ties by
// lower BOPs, then lexicographic configuration. Entries are evaluated
// independently (optionally across opts.jobs threads) and merged by index,
// so the ranking does not depend on the thread count.
inline std::vector<OracleEntry> brute_force_configs(const QuantMlp& model,
                                                    const Dataset& data,
                                                    double lambda,
                                                    const OracleOptions& opts = {}) {
  if (lambda < 0.0) {
    throw std::invalid_argument("brute_force_configs: lambda must be >= 0");
  }
  if (opts.finetune_steps < 0) {
    throw std::invalid_argument("brute_force_configs: negative finetune budget");
  }
  const BigInt total =
      search_space_size(model.spec().cost_layers(), model.spec().ladder);
  if (total > BigInt(opts.max_configs)) {
    throw std::invalid_argument(
        "brute_force_configs: " + total.str() +
        " configurations exceed the budget of " + std::to_string(opts.max_configs) +
        "; shrink the network or the ladder");
  }
  std::vector<CompressionConfig> configs = detail::enumerate_configs(model);
  if (BigInt(configs.size()) != total) {
    throw std::logic_error("brute_force_configs: enumerated " +
                           std::to_string(configs.size()) + " configs, expected " +
                           total.str());
  }

  std::vector<OracleEntry> entries(configs.size());
  auto eval_strided = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < configs.size(); i += stride) {
      entries[i] = oracle_objective(model, data, configs[i], lambda, opts);
    }
  };
  const std::size_t jobs =
      std::min<std::size_t>(std::max<std::size_t>(opts.jobs, 1), entries.size());
  if (jobs <= 1) {
    eval_strided(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(eval_strided, j, jobs);
    for (std::thread& t : pool) t.join();
  }

  std::sort(entries.begin(), entries.end(),
            [](const OracleEntry& a, const OracleEntry& b) {
              if (a.objective != b.objective) return a.objective < b.objective;
              if (a.bops != b.bops) return a.bops < b.bops;
              return config_precedes(a.config, b.config);
            });
  return entries;
}

// Strictly-better count: how many ranked entries beat the given objective.
inline std::size_t oracle_rank(const std::vector<OracleEntry>& ranked,
                               double objective_value) {
  std::size_t rank = 0;
  for (const OracleEntry& e : ranked) {
    if (e.objective < objective_value) ++rank;
  }
  return rank;
}

// ---- two-stage baseline ----

// Threshold so low that a gate saturates hard-open: sigmoid(metric + 1e9) is
// exactly 1 in doubles, so the pinned threshold also receives an exactly-zero
// straight-through gradient and never moves during training.
constexpr double kOpenThreshold = -1e9;

struct SequentialResult {
  CompressionConfig prune_stage;  // top-rung bitwidths, searched pruning
  CompressionConfig config;       // stage-two bitwidths over stage-one pruning
};

// Prune-then-quantize baseline: stage one searches only the pruning gates at
// top-rung quantization (bit thresholds pinned open); stage two removes the
// pruned groups from the network and searches only the bitwidths there. The
// combined configuration is expressed on the original architecture so its
// objective is directly comparable with a jointly searched one.
inline SequentialResult sequential_search(const QuantMlp& snapshot,
                                          const Dataset& data,
                                          const SearchRunConfig& cfg, Rng& rng) {
  const MlpSpec& spec = snapshot.spec();

  QuantMlp pruner = snapshot;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    if (spec.pinned(l)) continue;
    for (int j = 1; j < spec.ladder.rungs(); ++j) {
      const std::string rung = std::to_string(spec.ladder.bit(j));
      pruner.param(MlpSpec::layer_name(l) + ".alpha_w" + rung).value =
          Tensor::scalar(kOpenThreshold);
      pruner.param(MlpSpec::layer_name(l) + ".alpha_x" + rung).value =
          Tensor::scalar(kOpenThreshold);
    }
  }
  Rng prune_rng = rng.fork(1);
  SequentialResult out;
  out.prune_stage = search(pruner, data, cfg, prune_rng).config;

  // Rows that survive stage one, per layer; the classifier keeps everything.
  std::vector<std::vector<std::size_t>> kept_rows(spec.layer_count());
  MlpSpec qspec = spec;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const GroupPartition part(spec.dims[l + 1], spec.group_size);
    if (l + 1 < spec.layer_count()) {
      for (int c : out.prune_stage.layers[l].kept_groups) {
        const auto [r0, r1] = part.range(static_cast<std::size_t>(c));
        for (std::size_t r = r0; r < r1; ++r) kept_rows[l].push_back(r);
      }
    } else {
      for (std::size_t r = 0; r < spec.dims[l + 1]; ++r) kept_rows[l].push_back(r);
    }
    qspec.dims[l + 1] = kept_rows[l].size();
  }

  Rng scratch(0);
  QuantMlp quantizer(qspec, scratch);
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::string base = MlpSpec::layer_name(l);
    const Tensor& w = pruner.param(base + ".w").value;
    const Tensor& bias = pruner.param(base + ".b").value;
    const std::vector<std::size_t>& rows = kept_rows[l];
    std::vector<std::size_t> cols;
    if (l == 0) {
      for (std::size_t j = 0; j < spec.dims[0]; ++j) cols.push_back(j);
    } else {
      cols = kept_rows[l - 1];
    }
    Tensor wq = Tensor::zeros({rows.size(), cols.size()});
    Tensor bq = Tensor::zeros({rows.size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < cols.size(); ++j) {
        wq.at(i, j) = w.at(rows[i], cols[j]);
      }
      bq[i] = bias[rows[i]];
    }
    quantizer.param(base + ".w").value = std::move(wq);
    quantizer.param(base + ".b").value = std::move(bq);
    quantizer.param(base + ".v_w").value = pruner.param(base + ".v_w").value;
    quantizer.param(base + ".v_x").value = pruner.param(base + ".v_x").value;
    if (!spec.pinned(l)) {
      quantizer.param(base + ".alpha_prune").value = Tensor::scalar(kOpenThreshold);
      for (int j = 1; j < spec.ladder.rungs(); ++j) {
        const std::string rung = std::to_string(spec.ladder.bit(j));
        quantizer.param(base + ".alpha_w" + rung).value = Tensor::scalar(0.0);
        quantizer.param(base + ".alpha_x" + rung).value = Tensor::scalar(0.0);
      }
    }
  }
  Rng quant_rng = rng.fork(2);
  const CompressionConfig bits = search(quantizer, data, cfg, quant_rng).config;

  out.config = out.prune_stage;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    if (spec.pinned(l)) continue;
    out.config.layers[l].w_bits = bits.layers[l].w_bits;
    out.config.layers[l].a_bits = bits.layers[l].a_bits;
  }
  return out;
}

}  // namespace sbs
