#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sbs/autodiff.hpp"
#include "sbs/costmodel.hpp"
#include "sbs/data.hpp"
#include "sbs/model.hpp"
#include "sbs/rng.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

struct SearchRunConfig {
  double lambda = 0.1;
  int epochs_pretrain = 5;
  int epochs_search = 5;
  int epochs_finetune = 5;
  double lr_pretrain = 0.1;
  double lr_search = 0.05;
  double lr_finetune = 0.02;
  double momentum = 0.9;
  bool nesterov = false;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::vector<int> ladder_bits = {2, 4, 8};
  std::size_t group_size = 2;
  bool weight_normalization = false;

  void validate() const {
    if (lambda < 0.0) throw std::invalid_argument("SearchRunConfig: lambda must be >= 0");
    if (epochs_pretrain < 1 || epochs_search < 1 || epochs_finetune < 1) {
      throw std::invalid_argument("SearchRunConfig: epochs must be >= 1");
    }
    if (lr_pretrain <= 0.0 || lr_search <= 0.0 || lr_finetune <= 0.0) {
      throw std::invalid_argument("SearchRunConfig: learning rates must be positive");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
      throw std::invalid_argument("SearchRunConfig: momentum must be in [0, 1)");
    }
    if (batch_size == 0) throw std::invalid_argument("SearchRunConfig: zero batch size");
    BitLadder::of(ladder_bits);
    if (group_size == 0) throw std::invalid_argument("SearchRunConfig: zero group size");
  }

  BitLadder ladder() const { return BitLadder::of(ladder_bits); }
};

// Combined objective of accuracy and compression pressure.
inline double objective(double ce_loss, double resource, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("objective: lambda must be >= 0");
  if (lambda == 0.0) return ce_loss;
  if (resource <= 0.0) {
    throw std::invalid_argument("objective: resource must be positive");
  }
  return ce_loss + lambda * std::log(resource);
}

struct MetricsRow {
  int epoch = 0;
  std::string phase;  // pretrain | search-w | search-x | finetune
  double ce_loss = 0.0;
  double resource = 0.0;  // gated R; 0 outside search
  double bops = 0.0;      // of the would-be extracted config
  std::string gate_summary;
};

struct SearchResult {
  CompressionConfig config;
  std::vector<MetricsRow> metrics;
  double final_objective = 0.0;
  double final_ce = 0.0;
};

namespace detail {

inline void check_finite(const QuantMlp& model, double loss, const std::string& phase,
                         int epoch) {
  if (std::isfinite(loss)) return;
  std::string offender = "loss";
  for (const Param& p : model.params()) {
    if (!p.value.all_finite()) {
      offender = p.name;
      break;
    }
  }
  throw std::runtime_error("search: non-finite loss at epoch " + std::to_string(epoch) +
                           " phase " + phase + " (first offender: " + offender + ")");
}

inline std::string summarize_gates(const QuantMlp& model,
                                   const CompressionConfig& cfg) {
  std::ostringstream out;
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    const LayerConfig& lc = cfg.layers[l];
    if (l) out << ";";
    out << lc.name << ":w" << lc.w_bits << ":a" << lc.a_bits << ":g"
        << lc.kept_groups.size() << "/"
        << GroupPartition(model.spec().dims[l + 1], model.spec().group_size).count();
  }
  return out.str();
}

}  // namespace detail

// SGD with classical or Nesterov momentum over the parameters bound into one
// graph build. Quantization intervals are floored to stay usable.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum, bool nesterov)
      : lr_(lr), momentum_(momentum), nesterov_(nesterov) {}

  void step(const std::vector<std::pair<Param*, ad::NodePtr>>& bound,
            const ad::Gradients& grads) const {
    for (const auto& [param, node] : bound) {
      const Tensor* g = grads.find(node.get());
      if (!g) continue;  // parameter unreachable from the loss this build
      Tensor& v = param->velocity;
      Tensor& w = param->value;
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + (*g)[i];
        w[i] -= lr_ * (nesterov_ ? momentum_ * v[i] + (*g)[i] : v[i]);
      }
      if (param->name.ends_with(".v_w") || param->name.ends_with(".v_x")) {
        clamp_interval(w);
      }
    }
  }

 private:
  static void clamp_interval(Tensor& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 1e-4) v[i] = 1e-4;
    }
  }

  double lr_, momentum_, nesterov_;
};

inline double accuracy(QuantMlp& model, const Dataset& data,
                       const CompressionConfig& cfg) {
  QuantMlp::Build b = model.forward_fixed(data.x, cfg);
  const Tensor& logits = b.logits->value();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (static_cast<int>(best) == data.y[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Plain full-precision training; produces the starting point the search
// expects.
inline std::vector<MetricsRow> pretrain(QuantMlp& model, const Dataset& data,
                                        const SearchRunConfig& cfg, Rng& rng) {
  cfg.validate();
  data.validate();
  SgdOptimizer opt(cfg.lr_pretrain, cfg.momentum, cfg.nesterov);
  BatchPlan plan(data.size(), cfg.batch_size);
  std::vector<MetricsRow> rows;
  for (int epoch = 1; epoch <= cfg.epochs_pretrain; ++epoch) {
    Rng order = rng.fork(static_cast<std::uint64_t>(epoch));
    plan.reshuffle(order);
    double ce_sum = 0.0;
    for (std::size_t bi = 0; bi < plan.batches(); ++bi) {
      const std::vector<std::size_t> idx = plan.batch(bi);
      QuantMlp::Build b = model.forward_float(take_rows(data.x, idx));
      ad::NodePtr loss = ad::cross_entropy_logits(b.logits, take_labels(data.y, idx));
      detail::check_finite(model, loss->value().item(), "pretrain", epoch);
      opt.step(b.bound, ad::backward(loss));
      ce_sum += loss->value().item() * static_cast<double>(idx.size());
    }
    MetricsRow row;
    row.epoch = epoch;
    row.phase = "pretrain";
    row.ce_loss = ce_sum / static_cast<double>(data.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

// Algorithm: per epoch, update weights plus the weight-side quantization
// parameters, then weights plus the activation side. The inactive side enters
// the graph as constants, so its gradients are exactly zero by construction.
inline SearchResult search(QuantMlp& model, const Dataset& data,
                           const SearchRunConfig& cfg, Rng& rng) {
  cfg.validate();
  data.validate();
  if (model.spec().ladder != cfg.ladder() ||
      model.spec().group_size != cfg.group_size ||
      model.spec().weight_normalization != cfg.weight_normalization) {
    throw std::invalid_argument("search: model spec disagrees with run config");
  }
  SgdOptimizer opt(cfg.lr_search, cfg.momentum, cfg.nesterov);
  BatchPlan plan(data.size(), cfg.batch_size);
  const Tensor calibration = take_rows(data.x, BatchPlan(data.size(), cfg.batch_size).batch(0));
  SearchResult result;

  auto half_step = [&](int epoch, ParamFamily family, const std::string& phase,
                       Rng& order) {
    plan.reshuffle(order);
    double ce_sum = 0.0;
    double last_r = 0.0;
    for (std::size_t bi = 0; bi < plan.batches(); ++bi) {
      const std::vector<std::size_t> idx = plan.batch(bi);
      QuantMlp::Build b = model.forward_gated(take_rows(data.x, idx), family);
      ad::NodePtr ce = ad::cross_entropy_logits(b.logits, take_labels(data.y, idx));
      ad::NodePtr loss = ce;
      if (cfg.lambda > 0.0) {
        if (b.cost->value().item() <= 0.0) {
          throw std::runtime_error("search: resource model hit zero at epoch " +
                                   std::to_string(epoch) + " phase " + phase);
        }
        loss = ad::add(ce, ad::mul_scalar(ad::log(b.cost), cfg.lambda));
      }
      detail::check_finite(model, loss->value().item(), phase, epoch);
      opt.step(b.bound, ad::backward(loss));
      ce_sum += ce->value().item() * static_cast<double>(idx.size());
      last_r = b.cost->value().item();
    }
    CompressionConfig snapshot = model.extract_config(calibration);
    MetricsRow row;
    row.epoch = epoch;
    row.phase = phase;
    row.ce_loss = ce_sum / static_cast<double>(data.size());
    row.resource = last_r;
    row.bops = discrete_cost(model.spec().cost_layers(), snapshot).bops;
    row.gate_summary = detail::summarize_gates(model, snapshot);
    result.metrics.push_back(std::move(row));
  };

  for (int epoch = 1; epoch <= cfg.epochs_search; ++epoch) {
    Rng order_w = rng.fork(2 * static_cast<std::uint64_t>(epoch));
    Rng order_x = rng.fork(2 * static_cast<std::uint64_t>(epoch) + 1);
    half_step(epoch, ParamFamily::weights, "search-w", order_w);
    half_step(epoch, ParamFamily::activations, "search-x", order_x);
  }

  result.config = model.extract_config(calibration);
  QuantMlp::Build final_build = model.forward_gated(data.x, ParamFamily::shared);
  ad::NodePtr final_ce = ad::cross_entropy_logits(final_build.logits, data.y);
  result.final_ce = final_ce->value().item();
  result.final_objective =
      objective(result.final_ce, final_build.cost->value().item(), cfg.lambda);
  return result;
}

// Fixed-configuration quantization-aware training. Pruned rows are zeroed up
// front and shielded from updates by the forward masks.
inline std::vector<MetricsRow> finetune(QuantMlp& model, const Dataset& data,
                                        const CompressionConfig& config,
                                        const SearchRunConfig& cfg, Rng& rng) {
  cfg.validate();
  data.validate();
  model.zero_pruned_rows(config);
  SgdOptimizer opt(cfg.lr_finetune, cfg.momentum, cfg.nesterov);
  BatchPlan plan(data.size(), cfg.batch_size);
  std::vector<MetricsRow> rows;
  const double bops = discrete_cost(model.spec().cost_layers(), config).bops;
  for (int epoch = 1; epoch <= cfg.epochs_finetune; ++epoch) {
    Rng order = rng.fork(static_cast<std::uint64_t>(epoch));
    plan.reshuffle(order);
    double ce_sum = 0.0;
    for (std::size_t bi = 0; bi < plan.batches(); ++bi) {
      const std::vector<std::size_t> idx = plan.batch(bi);
      QuantMlp::Build b = model.forward_fixed(take_rows(data.x, idx), config);
      ad::NodePtr loss = ad::cross_entropy_logits(b.logits, take_labels(data.y, idx));
      detail::check_finite(model, loss->value().item(), "finetune", epoch);
      opt.step(b.bound, ad::backward(loss));
      ce_sum += loss->value().item() * static_cast<double>(idx.size());
    }
    MetricsRow row;
    row.epoch = epoch;
    row.phase = "finetune";
    row.ce_loss = ce_sum / static_cast<double>(data.size());
    row.bops = bops;
    row.gate_summary = detail::summarize_gates(model, config);
    rows.push_back(std::move(row));
  }
  return rows;
}

// The full pipeline: pretrain, search, fine-tune at the extracted config.
struct PipelineResult {
  CompressionConfig config;
  std::vector<MetricsRow> metrics;
  double search_objective = 0.0;
  double pre_finetune_accuracy = 0.0;
  double final_accuracy = 0.0;
};

inline PipelineResult run_pipeline(QuantMlp& model, const Dataset& data,
                                   const SearchRunConfig& cfg) {
  Rng root(cfg.seed);
  Rng rng_pre = root.fork(1), rng_search = root.fork(2), rng_tune = root.fork(3);
  PipelineResult out;
  std::vector<MetricsRow> rows = pretrain(model, data, cfg, rng_pre);
  out.metrics.insert(out.metrics.end(), rows.begin(), rows.end());
  SearchResult searched = search(model, data, cfg, rng_search);
  out.metrics.insert(out.metrics.end(), searched.metrics.begin(),
                     searched.metrics.end());
  out.config = searched.config;
  out.search_objective = searched.final_objective;
  out.pre_finetune_accuracy = accuracy(model, data, out.config);
  rows = finetune(model, data, out.config, cfg, rng_tune);
  out.metrics.insert(out.metrics.end(), rows.begin(), rows.end());
  out.final_accuracy = accuracy(model, data, out.config);
  return out;
}

}  // namespace sbs
