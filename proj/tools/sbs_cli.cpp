#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sbs/baselines.hpp"
#include "sbs/config.hpp"
#include "sbs/costmodel.hpp"
#include "sbs/serialize.hpp"
#include "sbs/trainer.hpp"

namespace {

namespace fs = std::filesystem;

struct Invocation {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

// Relative --out paths land under SBS_OUT_DIR when it is set.
fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv("SBS_OUT_DIR")) {
      return fs::path(root) / p;
    }
  }
  return p;
}

std::string slurp_config(const std::string& path) {
  if (!fs::exists(path)) {
    throw sbs::ConfigError("config: file not found: " + path);
  }
  return sbs::read_file(path);
}

sbs::RunSpec load_spec(const Invocation& inv, std::string& raw_text) {
  raw_text = slurp_config(inv.config_path);
  sbs::RunSpec spec = sbs::RunSpec::parse(raw_text);
  if (inv.seed) spec.run.seed = *inv.seed;
  return spec;
}

nlohmann::json make_manifest(const std::string& command, const nlohmann::json& config,
                             std::uint64_t seed, const std::string& input_sha1,
                             const std::vector<std::pair<std::string, std::string>>& artifacts) {
  nlohmann::json m;
  m["command"] = command;
  m["config"] = config;
  m["seed"] = seed;
  m["input_sha1"] = input_sha1;
  nlohmann::json a = nlohmann::json::object();
  for (const auto& [name, rel] : artifacts) a[name] = rel;
  m["artifacts"] = std::move(a);
  return m;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  sbs::write_file_atomic(path, j.dump(2) + "\n");
}

// One full search run into `dir`; shared by the search command and each
// sweep subdirectory. The manifest is written last so its presence marks a
// complete run.
sbs::PipelineResult run_search_into(const fs::path& dir, const sbs::RunSpec& spec,
                                    const std::string& command,
                                    const std::string& input_sha1) {
  fs::create_directories(dir);
  const sbs::Dataset data = spec.make_dataset();
  sbs::Rng init(spec.run.seed);
  sbs::QuantMlp model(spec.net, init);
  const sbs::PipelineResult result = sbs::run_pipeline(model, data, spec.run);

  sbs::save_checkpoint(model, dir);
  nlohmann::json cfg_json;
  cfg_json["net"] = sbs::to_json(spec.net);
  cfg_json["config"] = sbs::to_json(result.config);
  write_json(dir / "config.json", cfg_json);
  sbs::write_file_atomic(dir / "metrics.csv", sbs::metrics_csv(result.metrics));
  write_json(dir / "manifest.json",
             make_manifest(command, spec.resolved(), spec.run.seed, input_sha1,
                           {{"checkpoint", "checkpoint.json"},
                            {"checkpoint_blob", "checkpoint.bin"},
                            {"config", "config.json"},
                            {"metrics", "metrics.csv"}}));
  return result;
}

int cmd_search(const Invocation& inv) {
  std::string raw;
  const sbs::RunSpec spec = load_spec(inv, raw);
  const fs::path dir = resolve_out(inv.out_dir);
  const sbs::PipelineResult result =
      run_search_into(dir, spec, "search", sbs::Sha1::of(raw));
  const sbs::CostReport cost =
      sbs::discrete_cost(spec.net.cost_layers(), result.config);
  std::cout << "search: objective " << sbs::format_double(result.search_objective)
            << ", accuracy " << sbs::format_double(result.final_accuracy)
            << ", bops " << sbs::format_double(cost.bops) << " ("
            << sbs::format_double(cost.bop_ratio) << "x vs float)\n"
            << "wrote " << (dir / "manifest.json").string() << "\n";
  return 0;
}

int cmd_report(const Invocation& inv) {
  const std::string raw = slurp_config(inv.config_path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error& e) {
    throw sbs::ConfigError(std::string("config: ") + e.what());
  }
  if (!root.is_object() || !root.contains("net") || !root.contains("config")) {
    throw sbs::ConfigError("config: expected an object with net and config blocks");
  }
  const sbs::MlpSpec net = sbs::parse_mlp_spec(root["net"], "net");
  const sbs::CompressionConfig cfg =
      sbs::parse_compression_config(root["config"], "config");
  sbs::CostReport report;
  try {
    report = sbs::discrete_cost(net.cost_layers(), cfg);
  } catch (const std::invalid_argument& e) {
    throw sbs::ConfigError(std::string("config: ") + e.what());
  }
  const std::string csv = sbs::report_csv(report);
  std::cout << csv;

  const fs::path dir = resolve_out(inv.out_dir);
  fs::create_directories(dir);
  sbs::write_file_atomic(dir / "report.csv", csv);
  nlohmann::json resolved;
  resolved["net"] = sbs::to_json(net);
  resolved["config"] = sbs::to_json(cfg);
  write_json(dir / "manifest.json",
             make_manifest("report", resolved, 0, sbs::Sha1::of(raw),
                           {{"report", "report.csv"}}));
  return 0;
}

int cmd_prop1(const Invocation& inv) {
  std::string raw;
  const sbs::RunSpec spec = load_spec(inv, raw);
  const sbs::RegressionTask task = spec.make_prop1_task(spec.run.seed);
  const sbs::Prop1Record rec = sbs::run_prop1_experiment(
      task, spec.prop1.steps, spec.prop1.seeds, spec.prop1.ladder, spec.prop1.lr);

  sbs::CsvWriter csv({"seed", "step", "single_loss", "multi_loss"});
  for (const sbs::Prop1Run& run : rec.runs) {
    for (std::size_t t = 0; t < run.single_loss.size(); ++t) {
      csv.row({std::to_string(run.seed), std::to_string(t),
               sbs::format_double(run.single_loss[t]),
               sbs::format_double(run.multi_loss[t])});
    }
  }
  const fs::path dir = resolve_out(inv.out_dir);
  fs::create_directories(dir);
  sbs::write_file_atomic(dir / "prop1.csv", csv.str());
  write_json(dir / "manifest.json",
             make_manifest("prop1", spec.resolved(), spec.run.seed,
                           sbs::Sha1::of(raw), {{"prop1", "prop1.csv"}}));
  std::cout << "prop1: max relative gap " << sbs::format_double(rec.max_relative_gap)
            << ", discretizations/step " << rec.single_discretizations_per_step
            << " vs " << rec.multi_discretizations_per_step << ", params "
            << rec.single_param_count << " vs " << rec.multi_param_count << "\n";
  return 0;
}

std::string config_label(const sbs::CompressionConfig& cfg) {
  std::string out;
  for (const sbs::LayerConfig& lc : cfg.layers) {
    if (!out.empty()) out += " ";
    out += lc.name + ":w" + std::to_string(lc.w_bits) + ":a" +
           std::to_string(lc.a_bits) + ":k";
    for (std::size_t i = 0; i < lc.kept_groups.size(); ++i) {
      if (i) out += "-";
      out += std::to_string(lc.kept_groups[i]);
    }
  }
  return out;
}

int cmd_oracle(const Invocation& inv) {
  std::string raw;
  const sbs::RunSpec spec = load_spec(inv, raw);
  const sbs::Dataset data = spec.make_dataset();
  sbs::Rng init(spec.run.seed);
  sbs::QuantMlp model(spec.net, init);
  sbs::Rng pre = sbs::Rng(spec.run.seed).fork(1);
  sbs::pretrain(model, data, spec.run, pre);
  const std::vector<sbs::OracleEntry> ranked =
      sbs::brute_force_configs(model, data, spec.run.lambda, spec.oracle);

  sbs::CsvWriter csv({"rank", "objective", "ce", "resource", "bops", "config"});
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const sbs::OracleEntry& e = ranked[i];
    csv.row({std::to_string(i), sbs::format_double(e.objective),
             sbs::format_double(e.ce), sbs::format_double(e.resource),
             sbs::format_double(e.bops), config_label(e.config)});
  }
  const fs::path dir = resolve_out(inv.out_dir);
  fs::create_directories(dir);
  sbs::write_file_atomic(dir / "ranking.csv", csv.str());
  write_json(dir / "manifest.json",
             make_manifest("oracle", spec.resolved(), spec.run.seed,
                           sbs::Sha1::of(raw), {{"ranking", "ranking.csv"}}));
  std::cout << "oracle: ranked " << ranked.size() << " configurations; best "
            << config_label(ranked.front().config) << " (objective "
            << sbs::format_double(ranked.front().objective) << ")\n";
  return 0;
}

int cmd_sweep(const Invocation& inv) {
  std::string raw;
  const sbs::RunSpec spec = load_spec(inv, raw);
  const fs::path dir = resolve_out(inv.out_dir);
  fs::create_directories(dir);
  const std::string input_sha1 = sbs::Sha1::of(raw);

  struct Row {
    double lambda = 0.0;
    double objective = 0.0;
    double ce = 0.0;
    double accuracy = 0.0;
    double bops = 0.0;
    double bop_ratio = 0.0;
  };
  std::vector<Row> rows(spec.sweep_lambdas.size());
  std::vector<std::string> subdirs(spec.sweep_lambdas.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(spec.sweep_lambdas.size());

  auto worker = [&]() {
    for (std::size_t i = next.fetch_add(1); i < spec.sweep_lambdas.size();
         i = next.fetch_add(1)) {
      try {
        sbs::RunSpec sub = spec;
        sub.run.lambda = spec.sweep_lambdas[i];
        const std::string tag = "lambda_" + sbs::format_double(sub.run.lambda);
        subdirs[i] = tag;
        const sbs::PipelineResult result =
            run_search_into(dir / tag, sub, "sweep:" + tag, input_sha1);
        const sbs::CostReport cost =
            sbs::discrete_cost(sub.net.cost_layers(), result.config);
        rows[i] = {sub.run.lambda,
                   result.search_objective,
                   result.metrics.empty() ? 0.0 : result.metrics.back().ce_loss,
                   result.final_accuracy,
                   cost.bops,
                   cost.bop_ratio};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(inv.jobs, 1);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::min(jobs, spec.sweep_lambdas.size()); ++j) {
      pool.emplace_back(worker);
    }
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  sbs::CsvWriter csv(
      {"lambda", "objective", "ce_loss", "accuracy", "bops", "bop_ratio"});
  std::vector<std::pair<std::string, std::string>> artifacts = {
      {"summary", "summary.csv"}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    csv.row({sbs::format_double(r.lambda), sbs::format_double(r.objective),
             sbs::format_double(r.ce), sbs::format_double(r.accuracy),
             sbs::format_double(r.bops), sbs::format_double(r.bop_ratio)});
    artifacts.emplace_back(subdirs[i], subdirs[i] + "/manifest.json");
    std::cout << "sweep: lambda " << sbs::format_double(r.lambda) << " -> objective "
              << sbs::format_double(r.objective) << ", bops "
              << sbs::format_double(r.bops) << "\n";
  }
  sbs::write_file_atomic(dir / "summary.csv", csv.str());
  write_json(dir / "manifest.json",
             make_manifest("sweep", spec.resolved(), spec.run.seed, input_sha1,
                           artifacts));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gate-based joint search over bitwidths and pruned groups"};
  app.require_subcommand(1);

  Invocation inv;
  std::uint64_t seed_flag = 0;
  std::vector<CLI::Option*> seed_opts;

  auto add_common = [&](CLI::App* sub, bool with_seed, bool with_jobs) {
    sub->add_option("--config", inv.config_path, "run configuration file")
        ->required();
    sub->add_option("--out", inv.out_dir, "output directory")->required();
    if (with_seed) {
      seed_opts.push_back(
          sub->add_option("--seed", seed_flag, "override the config seed"));
    }
    if (with_jobs) {
      sub->add_option("--jobs", inv.jobs, "parallel runs")->check(CLI::PositiveNumber);
    }
  };

  CLI::App* search = app.add_subcommand("search", "pretrain, search, finetune");
  add_common(search, true, false);
  CLI::App* report = app.add_subcommand("report", "per-layer cost table");
  add_common(report, false, false);
  CLI::App* prop1 = app.add_subcommand("prop1", "single-path vs multi-path losses");
  add_common(prop1, true, false);
  CLI::App* oracle = app.add_subcommand("oracle", "brute-force config ranking");
  add_common(oracle, true, false);
  CLI::App* sweep = app.add_subcommand("sweep", "search across lambda values");
  add_common(sweep, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (const CLI::Option* o : seed_opts) {
    if (o->count() > 0) inv.seed = seed_flag;
  }

  try {
    if (search->parsed()) return cmd_search(inv);
    if (report->parsed()) return cmd_report(inv);
    if (prop1->parsed()) return cmd_prop1(inv);
    if (oracle->parsed()) return cmd_oracle(inv);
    if (sweep->parsed()) return cmd_sweep(inv);
    std::cerr << "error: no subcommand selected\n";
    return 2;
  } catch (const sbs::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
