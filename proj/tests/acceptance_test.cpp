// Acceptance gate: ten behavioral criteria, each printed as one PASS/FAIL
// line with its measured quantities. Exit code 0 only when every criterion
// passes. Tolerances and protocols are pinned here, not configurable.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "sbs/autodiff.hpp"
#include "sbs/baselines.hpp"
#include "sbs/costmodel.hpp"
#include "sbs/data.hpp"
#include "sbs/decomposition.hpp"
#include "sbs/gates.hpp"
#include "sbs/model.hpp"
#include "sbs/quantizer.hpp"
#include "sbs/serialize.hpp"
#include "sbs/trainer.hpp"

namespace {

using namespace sbs;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) { return format_double(v); }

// ---- criterion 1: decomposition identity and prefix sums ----

Verdict c1_decomposition_identity() {
  const auto t0 = Clock::now();
  const BitLadder ladder = BitLadder::of({2, 4, 8});
  const std::size_t n = 100000;
  Rng rng(1);
  Tensor z = Tensor::zeros({n});
  for (auto& v : z.data()) v = rng.uniform();

  const BitDecomposition d = decompose(z, ladder);
  std::size_t violations = 0;
  double worst = 0.0;
  for (int k = 1; k <= ladder.rungs(); ++k) {
    const Tensor direct = discretize(z, ladder.step(k - 1));
    const Tensor prefix = d.reconstruct(k);
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = std::abs(prefix[i] - direct[i]);
      worst = std::max(worst, diff);
      if (diff > 1e-12) ++violations;
    }
  }
  const double elapsed = seconds_since(t0);
  Verdict v;
  v.pass = violations == 0 && elapsed < 5.0;
  v.detail = std::to_string(n) + " scalars, 3 prefixes, max |prefix - direct| " +
             num(worst) + ", violations " + std::to_string(violations) + ", " +
             num(elapsed) + " s";
  return v;
}

// ---- criterion 2: nested code grids ----

Verdict c2_grid_subset() {
  bool ok = verify_grid_subset(BitLadder::of({2, 4, 8}));
  // 2^{b_{j+1}} - 1 is divisible by 2^{b_j} - 1 along the ladder.
  ok = ok && (15 % 3 == 0) && (255 % 15 == 0);
  // Exact double equality of shared levels, not just closeness.
  for (int i = 0; i <= 3; ++i) {
    ok = ok && (static_cast<double>(i) / 3.0 ==
                static_cast<double>(85 * i) / 255.0);
    ok = ok && (static_cast<double>(i) / 3.0 ==
                static_cast<double>(5 * i) / 15.0);
  }
  for (int i = 0; i <= 15; ++i) {
    ok = ok && (static_cast<double>(i) / 15.0 ==
                static_cast<double>(17 * i) / 255.0);
  }
  Verdict v;
  v.pass = ok;
  v.detail = "2-bit grid inside 4-bit inside 8-bit, exact equality; 15%3=0, 255%15=0";
  return v;
}

// ---- criterion 3: truncation-error bound and monotonicity ----

Verdict c3_error_bound() {
  const auto t0 = Clock::now();
  const BitLadder ladder = BitLadder::of({2, 4, 8});
  Rng rng(7);
  std::size_t violations = 0;
  double worst_margin = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor z = Tensor::zeros({100});
    for (auto& v : z.data()) v = rng.uniform();
    const QuantErrorSeries series = quant_error_series(z, ladder);
    for (std::size_t k = 0; k + 1 < series.eps.size(); ++k) {
      if (series.eps[k + 1] > series.eps[k] + 1e-12) ++violations;
      const double gap = std::abs(series.eps[k] - series.eps[k + 1]);
      if (gap > series.bounds[k] + 1e-12) ++violations;
      worst_margin = std::max(worst_margin, gap - series.bounds[k]);
    }
  }
  const double elapsed = seconds_since(t0);
  Verdict v;
  v.pass = violations == 0 && elapsed < 5.0;
  v.detail = "100 vectors of dim 100, violations " + std::to_string(violations) +
             ", worst bound margin " + num(worst_margin) + ", " + num(elapsed) + " s";
  return v;
}

// ---- criterion 4: straight-through gradient contracts ----

Verdict c4_ste_contracts() {
  Rng rng(11);
  // (a) discretize backward is exactly the identity.
  bool identity_exact = true;
  for (double s : {1.0 / 3.0, 1.0 / 15.0, 1.0 / 255.0}) {
    Tensor z = Tensor::zeros({100});
    for (auto& v : z.data()) v = rng.uniform();
    ad::NodePtr zp = ad::parameter(z, "z");
    ad::Gradients grads = ad::backward(ad::sum(discretize_ste(zp, s)));
    const Tensor* g = grads.find(zp.get());
    if (!g) {
      identity_exact = false;
      break;
    }
    for (std::size_t i = 0; i < g->size(); ++i) {
      identity_exact = identity_exact && ((*g)[i] == 1.0);
    }
  }

  // (b) gate gradient to the threshold equals -S(m - a)(1 - S(m - a)).
  double worst_closed_form = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double m = rng.uniform();
    const double a = rng.uniform() - 0.5;
    ad::NodePtr ap = ad::parameter(Tensor::scalar(a), "alpha");
    ad::NodePtr gate = step_gate(ad::constant(Tensor::scalar(m)), ap);
    ad::Gradients grads = ad::backward(gate);
    const double got = grads.find(ap.get())->item();
    const double s = sigmoid_value(m - a);
    worst_closed_form = std::max(worst_closed_form, std::abs(got - (-s * (1.0 - s))));
  }

  // (c) composed thresholds match finite differences of the sigmoid
  // surrogate, each gate perturbed along the sigmoid anchored at its hard
  // operating point while the other gates keep their hard values: this is
  // precisely the function whose derivative the straight-through backward
  // computes.
  double worst_fd = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double m1 = rng.uniform(), m2 = rng.uniform();
    const double c1 = 2.0 * rng.uniform() - 1.0, c2 = 2.0 * rng.uniform() - 1.0;
    const double a1 = rng.uniform() - 0.5, a2 = rng.uniform() - 0.5;
    ad::NodePtr a1p = ad::parameter(Tensor::scalar(a1), "a1");
    ad::NodePtr a2p = ad::parameter(Tensor::scalar(a2), "a2");
    ad::NodePtr g1 = step_gate(ad::constant(Tensor::scalar(m1)), a1p);
    ad::NodePtr g2 = step_gate(ad::constant(Tensor::scalar(m2)), a2p);
    ad::NodePtr y = ad::mul(
        g1, ad::add_scalar(ad::mul_scalar(g2, c2), c1));
    ad::Gradients grads = ad::backward(y);

    const double g1h = heaviside(m1 - a1), g2h = heaviside(m2 - a2);
    const auto value = [&](double v1, double v2) { return v1 * (c1 + v2 * c2); };
    const auto anchored = [&](double m, double a, double da) {
      return sigmoid_value(m - a - da) - sigmoid_value(m - a);
    };
    const double h = 1e-5;
    const double fd1 = (value(g1h + anchored(m1, a1, h), g2h) -
                        value(g1h + anchored(m1, a1, -h), g2h)) /
                       (2.0 * h);
    const double fd2 = (value(g1h, g2h + anchored(m2, a2, h)) -
                        value(g1h, g2h + anchored(m2, a2, -h))) /
                       (2.0 * h);
    worst_fd = std::max(worst_fd, std::abs(grads.find(a1p.get())->item() - fd1));
    worst_fd = std::max(worst_fd, std::abs(grads.find(a2p.get())->item() - fd2));
  }

  Verdict v;
  v.pass = identity_exact && worst_closed_form <= 1e-12 && worst_fd <= 1e-5;
  v.detail = std::string("identity ") + (identity_exact ? "exact" : "BROKEN") +
             ", closed-form err " + num(worst_closed_form) + ", fd err " +
             num(worst_fd) + " over 100 instances each";
  return v;
}

// ---- criterion 5: cost model identities ----

std::vector<LayerSpec> cost_fixture() {
  std::vector<LayerSpec> layers(3);
  layers[0].name = "l1";
  layers[0].macs = 100.0;
  layers[0].weight_count = 80.0;
  layers[0].in_channels = 10;
  layers[0].out_channels = 8;
  layers[0].group_size = 2;
  layers[0].act_elements = 8.0;
  layers[1].name = "l2";
  layers[1].macs = 200.0;
  layers[1].weight_count = 48.0;
  layers[1].in_channels = 8;
  layers[1].out_channels = 6;
  layers[1].group_size = 2;
  layers[1].act_elements = 6.0;
  layers[2].name = "l3";
  layers[2].macs = 50.0;
  layers[2].weight_count = 24.0;
  layers[2].in_channels = 6;
  layers[2].out_channels = 4;
  layers[2].group_size = 2;
  layers[2].act_elements = 4.0;
  return layers;
}

std::vector<LayerGateSet> open_gates(const std::vector<LayerSpec>& layers,
                                     const BitLadder& ladder) {
  std::vector<LayerGateSet> gates;
  for (const LayerSpec& spec : layers) {
    LayerGateSet gs;
    for (int j = 1; j < ladder.rungs(); ++j) {
      gs.w_bits.push_back(ad::constant(Tensor::scalar(1.0)));
      gs.x_bits.push_back(ad::constant(Tensor::scalar(1.0)));
    }
    for (std::size_t c = 0; c < spec.groups(); ++c) {
      gs.prune.push_back(ad::constant(Tensor::scalar(1.0)));
    }
    gates.push_back(std::move(gs));
  }
  return gates;
}

Verdict c5_cost_model() {
  const BitLadder ladder = BitLadder::of({2, 4, 8});
  const std::vector<LayerSpec> layers = cost_fixture();

  CompressionConfig top;
  for (const LayerSpec& spec : layers) {
    LayerConfig lc;
    lc.name = spec.name;
    lc.w_bits = 8;
    lc.a_bits = 8;
    for (std::size_t c = 0; c < spec.groups(); ++c) {
      lc.kept_groups.push_back(static_cast<int>(c));
    }
    top.layers.push_back(std::move(lc));
  }

  const double gated = gated_cost(layers, open_gates(layers, ladder), ladder)
                           ->value()
                           .item();
  const double discrete = discrete_cost(layers, top).bops;
  const double rel = std::abs(gated - discrete) / discrete;

  // Exhaustive single flips: closing any one gate never raises the cost.
  std::size_t flips = 0, increases = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::size_t w_count = 2, x_count = 2;
    const std::size_t p_count = layers[l].groups();
    for (std::size_t slot = 0; slot < w_count + x_count + p_count; ++slot) {
      std::vector<LayerGateSet> gates = open_gates(layers, ladder);
      if (slot < w_count) {
        gates[l].w_bits[slot] = ad::constant(Tensor::scalar(0.0));
      } else if (slot < w_count + x_count) {
        gates[l].x_bits[slot - w_count] = ad::constant(Tensor::scalar(0.0));
      } else {
        gates[l].prune[slot - w_count - x_count] =
            ad::constant(Tensor::scalar(0.0));
      }
      const double flipped = gated_cost(layers, gates, ladder)->value().item();
      ++flips;
      if (flipped > gated + 1e-12) ++increases;
    }
  }

  // Uniform 4-bit with nothing pinned and nothing pruned: 32*32/(4*4) = 64.
  CompressionConfig four = top;
  for (LayerConfig& lc : four.layers) {
    lc.w_bits = 4;
    lc.a_bits = 4;
  }
  const double ratio = discrete_cost(layers, four).bop_ratio;

  Verdict v;
  v.pass = rel <= 1e-9 && increases == 0 && ratio == 64.0;
  v.detail = "all-open vs discrete rel err " + num(rel) + ", " +
             std::to_string(flips) + " single flips (" + std::to_string(increases) +
             " raised cost), uniform 4-bit ratio " + num(ratio);
  return v;
}

// ---- criterion 6: search-space size on the deep fixture ----

Verdict c6_search_space() {
  const fs::path path = fs::path(SBS_FIXTURE_DIR) / "resnet18_layers.json";
  const nlohmann::json root = nlohmann::json::parse(read_file(path));
  const std::size_t group_size = root.at("group_size").get<std::size_t>();
  std::vector<LayerSpec> layers;
  for (const nlohmann::json& e : root.at("layers")) {
    LayerSpec spec;
    spec.name = e.at("name").get<std::string>();
    spec.macs = e.at("macs").get<double>();
    spec.weight_count = e.at("weight_count").get<double>();
    spec.in_channels = e.at("in_channels").get<std::size_t>();
    spec.out_channels = e.at("out_channels").get<std::size_t>();
    spec.act_elements = e.at("act_elements").get<double>();
    spec.prunable = e.at("prunable").get<bool>();
    spec.group_size = group_size;
    layers.push_back(std::move(spec));
  }
  const BigInt total = search_space_size(layers, BitLadder::of({2, 4, 8}));
  const double approx = total.convert_to<double>();
  const long long two_sig = std::llround(approx / 1e33);

  Verdict v;
  v.pass = layers.size() == 18 && two_sig == 43;
  v.detail = "|space| = " + total.str() + " ~= " + num(approx) +
             " (2 significant figures: " + std::to_string(two_sig) +
             "e33, expected 43e33)";
  return v;
}

// ---- criterion 7: single-path vs multi-path regression ----

Verdict c7_single_vs_multi() {
  const auto t0 = Clock::now();
  Rng task_rng(42);
  const RegressionTask task = make_regression(10000, 10, 1.0, task_rng);
  const Prop1Record rec = run_prop1_experiment(task, 300, {1, 2, 3, 4, 5},
                                               BitLadder::of({2, 4, 8}), 0.1);
  const double elapsed = seconds_since(t0);
  Verdict v;
  v.pass = rec.max_relative_gap <= 0.05 &&
           rec.single_discretizations_per_step == 2 &&
           rec.multi_discretizations_per_step == 3 &&
           rec.single_param_count == 12 && rec.multi_param_count == 13 &&
           elapsed < 120.0;
  v.detail = "max relative gap " + num(rec.max_relative_gap) +
             " over 5 seeds, discretizations/step " +
             std::to_string(rec.single_discretizations_per_step) + " vs " +
             std::to_string(rec.multi_discretizations_per_step) + ", params " +
             std::to_string(rec.single_param_count) + " vs " +
             std::to_string(rec.multi_param_count) + ", " + num(elapsed) + " s";
  return v;
}

// ---- shared fixture for criteria 8 and 9 ----

MlpSpec tiny_net_spec() {
  MlpSpec spec;
  spec.dims = {4, 8, 8, 3};
  spec.group_size = 2;
  spec.ladder = BitLadder::of({2, 4});
  spec.head_bits = 8;
  return spec;
}

SearchRunConfig tiny_net_run(double lambda, std::uint64_t seed) {
  SearchRunConfig cfg;
  cfg.lambda = lambda;
  cfg.epochs_pretrain = 25;
  cfg.epochs_search = 20;
  cfg.lr_pretrain = 0.15;
  cfg.lr_search = 0.02;
  cfg.batch_size = 32;
  cfg.seed = seed;
  cfg.ladder_bits = {2, 4};
  cfg.group_size = 2;
  return cfg;
}

QuantMlp pretrained_tiny_net(const Dataset& data, const SearchRunConfig& cfg) {
  Rng init(cfg.seed);
  QuantMlp model(tiny_net_spec(), init);
  Rng pre = Rng(cfg.seed).fork(1);
  pretrain(model, data, cfg, pre);
  return model;
}

OracleOptions oracle_opts() {
  OracleOptions opts;
  opts.jobs = 4;
  return opts;
}

// ---- criterion 8: search lands in the oracle's top fifth ----

Verdict c8_oracle_rank() {
  const auto t0 = Clock::now();
  Rng data_rng(11);
  const Dataset data = make_blobs(96, 4, 3, data_rng);
  std::string ranks;
  bool ok = true;
  std::size_t space = 0;
  for (std::uint64_t seed : {3ull, 4ull, 5ull}) {
    const SearchRunConfig cfg = tiny_net_run(0.5, seed);
    const QuantMlp snapshot = pretrained_tiny_net(data, cfg);
    QuantMlp searcher = snapshot;
    Rng search_rng = Rng(seed).fork(2);
    const CompressionConfig found = search(searcher, data, cfg, search_rng).config;

    const std::vector<OracleEntry> ranked =
        brute_force_configs(snapshot, data, cfg.lambda, oracle_opts());
    const OracleEntry mine =
        oracle_objective(snapshot, data, found, cfg.lambda, oracle_opts());
    const std::size_t rank = oracle_rank(ranked, mine.objective);
    space = ranked.size();
    ok = ok && (rank < ranked.size() / 5);
    if (!ranks.empty()) ranks += "/";
    ranks += std::to_string(rank);
  }
  const double elapsed = seconds_since(t0);
  Verdict v;
  v.pass = ok && elapsed < 600.0;
  v.detail = "ranks " + ranks + " of " + std::to_string(space) +
             " at lambda 0.5, seeds 3/4/5 (top fifth = rank < " +
             std::to_string(space / 5) + "), " + num(elapsed) + " s";
  return v;
}

// ---- criterion 9: joint search vs prune-then-quantize ----

Verdict c9_joint_vs_sequential() {
  const auto t0 = Clock::now();
  Rng data_rng(11);
  const Dataset data = make_blobs(96, 4, 3, data_rng);
  std::string margins;
  bool ok = true;
  for (std::uint64_t seed : {3ull, 4ull, 5ull}) {
    const SearchRunConfig cfg = tiny_net_run(1.0, seed);
    const QuantMlp snapshot = pretrained_tiny_net(data, cfg);

    QuantMlp searcher = snapshot;
    Rng joint_rng = Rng(seed).fork(2);
    const CompressionConfig joint = search(searcher, data, cfg, joint_rng).config;

    Rng seq_rng = Rng(seed).fork(3);
    const CompressionConfig sequential =
        sequential_search(snapshot, data, cfg, seq_rng).config;

    const double joint_obj =
        oracle_objective(snapshot, data, joint, cfg.lambda, oracle_opts()).objective;
    const double seq_obj =
        oracle_objective(snapshot, data, sequential, cfg.lambda, oracle_opts())
            .objective;
    ok = ok && (joint_obj <= seq_obj + 1e-9);
    if (!margins.empty()) margins += "/";
    margins += num(seq_obj - joint_obj);
  }
  const double elapsed = seconds_since(t0);
  Verdict v;
  v.pass = ok;
  v.detail = "objective margins (sequential - joint) " + margins +
             " at lambda 1.0, seeds 3/4/5, " + num(elapsed) + " s";
  return v;
}

// ---- criterion 10: rerun determinism through the command line ----

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SBS_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
}

Verdict c10_determinism() {
  const fs::path dir = fs::temp_directory_path() / "sbs_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "config.json";
  write_file_atomic(cfg, R"({
    "net": {"dims": [4, 6, 3], "group_size": 2, "ladder": [2, 4], "head_bits": 8},
    "data": {"samples": 48, "features": 4, "classes": 3, "seed": 11},
    "run": {"lambda": 0.5, "epochs_pretrain": 5, "epochs_search": 5,
            "epochs_finetune": 3, "batch_size": 16, "seed": 1},
    "prop1": {"samples": 200, "dimension": 4, "steps": 10, "seeds": [1, 2]}
  })");

  bool ok = true;
  std::string what;
  const auto out = [&](const std::string& leaf) { return (dir / leaf).string(); };
  ok = ok && run_cli("search --config " + cfg.string() + " --out " + out("a")) == 0;
  ok = ok && run_cli("search --config " + cfg.string() + " --out " + out("b")) == 0;
  if (ok) {
    const bool metrics =
        read_file(dir / "a" / "metrics.csv") == read_file(dir / "b" / "metrics.csv");
    const bool manifest =
        read_file(dir / "a" / "manifest.json") == read_file(dir / "b" / "manifest.json");
    ok = metrics && manifest;
    what = std::string("search metrics ") + (metrics ? "identical" : "DIFFER") +
           ", manifests " + (manifest ? "identical" : "DIFFER");
  } else {
    what = "search command failed";
  }
  if (ok) {
    ok = run_cli("prop1 --config " + cfg.string() + " --out " + out("p1")) == 0 &&
         run_cli("prop1 --config " + cfg.string() + " --out " + out("p2")) == 0;
    if (ok) {
      const bool prop =
          read_file(dir / "p1" / "prop1.csv") == read_file(dir / "p2" / "prop1.csv");
      ok = prop;
      what += std::string(", prop1 csv ") + (prop ? "identical" : "DIFFER");
    } else {
      what += ", prop1 command failed";
    }
  }
  Verdict v;
  v.pass = ok;
  v.detail = what;
  return v;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"decomposition identity and prefix sums", c1_decomposition_identity},
      {"nested code grids", c2_grid_subset},
      {"truncation-error bound", c3_error_bound},
      {"straight-through gradient contracts", c4_ste_contracts},
      {"cost model identities", c5_cost_model},
      {"search-space size", c6_search_space},
      {"single-path vs multi-path regression", c7_single_vs_multi},
      {"search vs brute-force oracle", c8_oracle_rank},
      {"joint vs sequential search", c9_joint_vs_sequential},
      {"rerun determinism", c10_determinism},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " ("
              << criteria[i].first << "): " << v.detail << "\n";
  }
  std::cout << (all ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED") << " (10 criteria)\n";
  return all ? 0 : 1;
}
