#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "sbs/baselines.hpp"
#include "sbs/data.hpp"
#include "sbs/model.hpp"
#include "sbs/trainer.hpp"

using namespace sbs;
using namespace sbs::test;

namespace {

Tensor random_unit(Rng& rng, std::vector<std::size_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

// Logits far enough apart that softmax returns an exactly one-hot vector.
Tensor one_hot_logits(std::size_t rungs, std::size_t hot) {
  Tensor t = Tensor::zeros({rungs});
  t[hot] = 1000.0;
  return t;
}

// Two searchable layers with four groups each over a two-rung ladder:
// (2^2 * 4)^2 = 256 configurations, the classifier pinned to one option.
MlpSpec tiny_net_spec() {
  MlpSpec spec;
  spec.dims = {4, 8, 8, 3};
  spec.group_size = 2;
  spec.ladder = BitLadder::of({2, 4});
  spec.head_bits = 8;
  return spec;
}

Dataset tiny_net_data() {
  Rng rng(11);
  return make_blobs(96, 4, 3, rng);
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
  Rng pre_rng = Rng(cfg.seed).fork(1);
  pretrain(model, data, cfg, pre_rng);
  return model;
}

}  // namespace

TEST_CASE("one-hot path logits collapse the mixture to one discretization") {
  const BitLadder ladder = BitLadder::of({2, 4, 8});
  Rng rng(5);
  const Tensor z0 = random_unit(rng, {8});
  for (int i = 0; i < ladder.rungs(); ++i) {
    auto z = ad::constant(z0);
    auto logits = ad::constant(one_hot_logits(3, static_cast<std::size_t>(i)));
    auto mix = multipath_quantized_weight(z, ladder, logits);
    CHECK(bitwise_equal(mix->value(), discretize(z0, ladder.step(i))));
  }
}

TEST_CASE("uniform two-path mixture reproduces the worked midpoint value") {
  // D(0.55, 1/3) = 2/3 and D(0.55, 1/15) = 8/15; their mean is 0.6.
  const BitLadder ladder = BitLadder::of({2, 4});
  auto z = ad::constant(Tensor::scalar(0.55));
  auto logits = ad::constant(Tensor::zeros({2}));
  auto mix = multipath_quantized_weight(z, ladder, logits);
  CHECK(std::abs(mix->value().item() - 0.6) < 1e-12);
}

TEST_CASE("path logits gradients match finite differences") {
  const BitLadder ladder = BitLadder::of({2, 4, 8});
  Rng rng(13);
  const Tensor z0 = random_unit(rng, {6});
  const Tensor logits0({3}, {0.3, -0.2, 0.5});

  // The per-path values are constants with respect to the logits, so the
  // mixture is smooth there and central differences are a valid oracle.
  auto loss_at = [&](const Tensor& lv) {
    auto mix = multipath_quantized_weight(ad::constant(z0), ladder, ad::parameter(lv));
    return ad::mean(ad::mul(mix, mix));
  };
  auto logits = ad::parameter(logits0);
  auto mix = multipath_quantized_weight(ad::constant(z0), ladder, logits);
  auto grads = ad::backward(ad::mean(ad::mul(mix, mix)));
  auto f = [&](const Tensor& lv) { return loss_at(lv)->value().item(); };
  CHECK(max_abs_diff(grads.at(logits), fd_grad(f, logits0)) < 1e-5);
}

TEST_CASE("hard path selection and hard gate prefixes agree on discrete points") {
  const BitLadder ladder = BitLadder::of({2, 4, 8});
  Rng rng(3);
  const Tensor z0 = random_unit(rng, {64});

  for (int i = 0; i < ladder.rungs(); ++i) {
    const Tensor direct = discretize(z0, ladder.step(i));

    auto mix = multipath_quantized_weight(
        ad::constant(z0), ladder, ad::constant(one_hot_logits(3, static_cast<std::size_t>(i))));
    CHECK(bitwise_equal(mix->value(), direct));

    // Matching prefix: gates open through rung i, closed beyond.
    BitDecompositionNodes dec = decompose(ad::constant(z0), ladder);
    std::vector<ad::NodePtr> gates;
    for (int j = 1; j < ladder.rungs(); ++j) {
      gates.push_back(ad::constant(Tensor::scalar(j <= i ? 1.0 : 0.0)));
    }
    const Tensor nested = nested_gated_sum(dec, gates)->value();
    if (i == 0) {
      // The base rung is a single discretization on both sides.
      CHECK(bitwise_equal(nested, direct));
    } else {
      // Deeper prefixes accumulate base + offsets in a different association
      // order than the direct rounding, so agreement is to rounding noise.
      CHECK(max_abs_diff(nested, direct) < 1e-12);
    }
    CHECK(max_abs_diff(nested, mix->value()) < 1e-12);
  }
}

TEST_CASE("zero-noise representable regression drives both schemes to zero loss") {
  // w* entries sit on the 2-bit weight grid {-1, -1/3, 1/3, 1} and on every
  // finer grid, so both schemes can express the optimum exactly.
  RegressionTask task;
  task.noise_std = 0.0;
  const std::size_t n = 256, d = 4;
  task.w_star = Tensor({1, d}, {1.0 / 3.0, 1.0, 1.0 / 3.0, 1.0});
  Rng rng(9);
  task.x = Tensor::zeros({n, d});
  task.y = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = rng.normal();
      task.x.at(i, j) = v;
      dot += task.w_star.at(0, j) * v;
    }
    task.y.at(i, 0) = dot;
  }

  Prop1Record rec = run_prop1_experiment(task, 300, {1});
  REQUIRE(rec.runs.size() == 1);
  CHECK(rec.runs[0].single_final < 1e-10);
  CHECK(rec.runs[0].multi_final < 1e-10);
}

TEST_CASE("single path tracks multi path on the paper regression task") {
  Rng rng(42);
  const RegressionTask task = make_regression(10000, 10, 1.0, rng);
  const Prop1Record rec = run_prop1_experiment(task, 300, {1, 2, 3, 4, 5});

  REQUIRE(rec.runs.size() == 5);
  for (const Prop1Run& run : rec.runs) {
    CHECK(run.relative_gap <= 0.05);
    CHECK(run.single_loss.size() == run.multi_loss.size());
  }
  CHECK(rec.max_relative_gap <= 0.05);

  // Per-step discretizations: K-1 residual rungs against K full paths.
  const int k = BitLadder::default_ladder().rungs();
  REQUIRE(k == 3);
  CHECK(rec.single_discretizations_per_step == k - 1);
  CHECK(rec.multi_discretizations_per_step == k);
  CHECK(static_cast<double>(rec.single_discretizations_per_step) /
            rec.multi_discretizations_per_step ==
        static_cast<double>(k - 1) / k);

  // d weights plus K-1 thresholds against d weights plus K path logits.
  CHECK(rec.single_param_count == 12);
  CHECK(rec.multi_param_count == 13);
}

TEST_CASE("oracle enumerates the whole space in a deterministic ranking") {
  const Dataset data = tiny_net_data();
  const SearchRunConfig cfg = tiny_net_run(0.0, 3);
  QuantMlp model = pretrained_tiny_net(data, cfg);

  REQUIRE(search_space_size(model.spec().cost_layers(), model.spec().ladder) == 256);

  OracleOptions serial;
  serial.jobs = 1;
  const std::vector<OracleEntry> ranked = brute_force_configs(model, data, 0.0, serial);
  REQUIRE(ranked.size() == 256);
  for (std::size_t i = 0; i + 1 < ranked.size(); ++i) {
    CHECK(ranked[i].objective <= ranked[i + 1].objective);
  }
  for (const OracleEntry& e : ranked) {
    // At lambda zero the objective is the fine-tuned cross entropy alone.
    CHECK(e.objective == e.ce);
    CHECK(ranked.front().ce <= e.ce);
  }

  OracleOptions threaded;
  threaded.jobs = 4;
  const std::vector<OracleEntry> again = brute_force_configs(model, data, 0.0, threaded);
  REQUIRE(again.size() == ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    CHECK(again[i].objective == ranked[i].objective);
    CHECK(again[i].ce == ranked[i].ce);
    CHECK(again[i].bops == ranked[i].bops);
    CHECK(!config_precedes(again[i].config, ranked[i].config));
    CHECK(!config_precedes(ranked[i].config, again[i].config));
  }
}

TEST_CASE("oracle budget and argument validation") {
  const Dataset data = tiny_net_data();

  MlpSpec big;
  big.dims = {4, 64, 64, 3};
  big.group_size = 1;
  big.ladder = BitLadder::of({2, 4, 8});
  big.head_bits = 8;
  Rng init(1);
  QuantMlp model(big, init);
  // (3^2 * 64)^2 = 331776 configurations, past the default 1e5 budget.
  CHECK_THROWS_WITH(brute_force_configs(model, data, 0.0),
                    Catch::Matchers::ContainsSubstring("shrink the network or the ladder"));

  Rng init2(1);
  QuantMlp small(tiny_net_spec(), init2);
  CHECK_THROWS_AS(brute_force_configs(small, data, -1.0), std::invalid_argument);
  OracleOptions bad;
  bad.finetune_steps = -1;
  CHECK_THROWS_AS(brute_force_configs(small, data, 0.0, bad), std::invalid_argument);
}

TEST_CASE("an unsearchable network yields a single oracle entry") {
  MlpSpec spec;
  spec.dims = {4, 3};  // the classifier alone, pinned to one option
  spec.group_size = 2;
  spec.ladder = BitLadder::of({2, 4});
  spec.head_bits = 8;
  Rng init(1);
  QuantMlp model(spec, init);
  const Dataset data = tiny_net_data();

  const std::vector<OracleEntry> ranked = brute_force_configs(model, data, 0.5);
  REQUIRE(ranked.size() == 1);
  CHECK(ranked[0].config.layers.size() == 1);
  CHECK(ranked[0].config.layers[0].w_bits == 8);
  CHECK(ranked[0].config.layers[0].a_bits == 8);
}

TEST_CASE("gradient search lands in the oracle's top fifth") {
  const Dataset data = tiny_net_data();
  OracleOptions opts;
  opts.jobs = 4;
  for (std::uint64_t seed : {3ULL, 4ULL, 5ULL}) {
    const SearchRunConfig cfg = tiny_net_run(0.5, seed);
    QuantMlp model = pretrained_tiny_net(data, cfg);
    const QuantMlp snapshot = model;

    const std::vector<OracleEntry> ranked =
        brute_force_configs(snapshot, data, cfg.lambda, opts);
    Rng search_rng = Rng(seed).fork(2);
    const SearchResult sr = search(model, data, cfg, search_rng);
    const OracleEntry entry =
        oracle_objective(snapshot, data, sr.config, cfg.lambda, opts);
    const std::size_t rank = oracle_rank(ranked, entry.objective);

    INFO("seed " << seed << " rank " << rank << " of " << ranked.size());
    CHECK(static_cast<double>(rank) < 0.2 * static_cast<double>(ranked.size()));
  }
}

TEST_CASE("joint search does not lose to prune-then-quantize") {
  const Dataset data = tiny_net_data();
  OracleOptions opts;
  opts.jobs = 4;
  for (std::uint64_t seed : {3ULL, 4ULL, 5ULL}) {
    const SearchRunConfig cfg = tiny_net_run(1.0, seed);
    QuantMlp model = pretrained_tiny_net(data, cfg);
    const QuantMlp snapshot = model;

    Rng joint_rng = Rng(seed).fork(2);
    const SearchResult joint = search(model, data, cfg, joint_rng);
    Rng seq_rng = Rng(seed).fork(3);
    const SequentialResult seq = sequential_search(snapshot, data, cfg, seq_rng);

    // Stage one cannot touch the bitwidths: they stay at the top rung.
    for (std::size_t l = 0; l + 1 < seq.prune_stage.layers.size(); ++l) {
      CHECK(seq.prune_stage.layers[l].w_bits == 4);
      CHECK(seq.prune_stage.layers[l].a_bits == 4);
      CHECK(seq.config.layers[l].kept_groups == seq.prune_stage.layers[l].kept_groups);
    }

    const OracleEntry joint_entry =
        oracle_objective(snapshot, data, joint.config, cfg.lambda, opts);
    const OracleEntry seq_entry =
        oracle_objective(snapshot, data, seq.config, cfg.lambda, opts);
    INFO("seed " << seed << " joint " << joint_entry.objective << " sequential "
                 << seq_entry.objective);
    CHECK(joint_entry.objective <= seq_entry.objective + 1e-9);
  }
}
