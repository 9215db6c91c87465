#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sbs/baselines.hpp"
#include "sbs/data.hpp"
#include "sbs/model.hpp"
#include "sbs/trainer.hpp"

namespace sbs {

// Raised on any malformed run configuration; the message names the offending
// field (or the line/column for a syntax error) so the CLI can surface it
// verbatim with exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

// Strict block reader: typed getters with defaults, dotted-path error
// messages, and an unknown-field check for everything never asked for.
class BlockReader {
 public:
  BlockReader(nlohmann::json obj, std::string path)
      : obj_(std::move(obj)), path_(std::move(path)) {
    if (!obj_.is_object()) {
      throw ConfigError(path_ + ": must be an object");
    }
  }

  double number(const char* key, double fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError(at(key) + ": must be a number");
    return v->get<double>();
  }

  int integer(const char* key, int fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_number_integer()) throw ConfigError(at(key) + ": must be an integer");
    return v->get<int>();
  }

  std::size_t count(const char* key, std::size_t fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
      throw ConfigError(at(key) + ": must be a non-negative integer");
    }
    return v->get<std::size_t>();
  }

  std::uint64_t seed(const char* key, std::uint64_t fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
      throw ConfigError(at(key) + ": must be a non-negative integer");
    }
    return v->get<std::uint64_t>();
  }

  bool boolean(const char* key, bool fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ConfigError(at(key) + ": must be true or false");
    return v->get<bool>();
  }

  std::vector<int> int_array(const char* key, std::vector<int> fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(at(key) + ": must be an array");
    std::vector<int> out;
    for (const nlohmann::json& e : *v) {
      if (!e.is_number_integer()) {
        throw ConfigError(at(key) + ": must hold integers");
      }
      out.push_back(e.get<int>());
    }
    return out;
  }

  std::vector<std::size_t> count_array(const char* key, std::vector<std::size_t> fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(at(key) + ": must be an array");
    std::vector<std::size_t> out;
    for (const nlohmann::json& e : *v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0) {
        throw ConfigError(at(key) + ": must hold non-negative integers");
      }
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  std::vector<double> number_array(const char* key, std::vector<double> fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(at(key) + ": must be an array");
    std::vector<double> out;
    for (const nlohmann::json& e : *v) {
      if (!e.is_number()) throw ConfigError(at(key) + ": must hold numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::uint64_t> seed_array(const char* key,
                                        std::vector<std::uint64_t> fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(at(key) + ": must be an array");
    std::vector<std::uint64_t> out;
    for (const nlohmann::json& e : *v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0) {
        throw ConfigError(at(key) + ": must hold non-negative integers");
      }
      out.push_back(e.get<std::uint64_t>());
    }
    return out;
  }

  std::string text(const char* key) {
    const nlohmann::json* v = find(key);
    if (!v || !v->is_string()) throw ConfigError(at(key) + ": must be a string");
    return v->get<std::string>();
  }

  // head_bits admits an explicit null meaning "no pinned classifier".
  std::optional<int> nullable_integer(const char* key, std::optional<int> fallback) {
    const nlohmann::json* v = find(key);
    if (!v) return fallback;
    if (v->is_null()) return std::nullopt;
    if (!v->is_number_integer()) {
      throw ConfigError(at(key) + ": must be an integer or null");
    }
    return v->get<int>();
  }

  void finish() const {
    for (const auto& item : obj_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError(at(item.key().c_str()) + ": unknown field");
      }
    }
  }

  std::string at(const char* key) const { return path_ + "." + key; }

 private:
  const nlohmann::json* find(const char* key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  nlohmann::json obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline nlohmann::json block(const nlohmann::json& root, const char* key) {
  const auto it = root.find(key);
  if (it == root.end()) return nlohmann::json::object();
  return *it;
}

}  // namespace detail

// Reads a network description block; shared by run configs and the stored
// artifacts the report command consumes.
inline MlpSpec parse_mlp_spec(const nlohmann::json& obj, const std::string& path) {
  detail::BlockReader r(obj, path);
  MlpSpec spec;
  spec.dims = r.count_array("dims", {4, 8, 8, 3});
  spec.group_size = r.count("group_size", 2);
  const std::vector<int> ladder = r.int_array("ladder", {2, 4});
  spec.head_bits = r.nullable_integer("head_bits", 8);
  spec.weight_normalization = r.boolean("weight_normalization", false);
  r.finish();
  try {
    spec.ladder = BitLadder::of(ladder);
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return spec;
}

// Synthetic classification data parameters (make_blobs).
struct DataSpec {
  std::size_t samples = 96;
  std::size_t features = 4;
  std::size_t classes = 3;
  double spread = 0.2;
  std::uint64_t seed = 11;
};

// Toy regression comparison parameters (run_prop1_experiment). The ladder is
// the experiment's own; it need not match the searched network's ladder.
struct Prop1Spec {
  std::size_t samples = 10000;
  std::size_t dimension = 10;
  double noise_std = 1.0;
  int steps = 300;
  double lr = 0.1;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  BitLadder ladder = BitLadder::default_ladder();
};

// One run, fully resolved: network, data, training schedule, and the optional
// oracle / proposition-1 / sweep blocks. The single source of randomness is
// run.seed (plus the data block's own seed); nothing reads ambient entropy.
struct RunSpec {
  MlpSpec net;
  DataSpec data;
  SearchRunConfig run;
  OracleOptions oracle;
  Prop1Spec prop1;
  std::vector<double> sweep_lambdas = {0.0, 0.01, 0.1, 1.0};

  static RunSpec parse(const std::string& text) {
    nlohmann::json root;
    try {
      root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      // Convert the parser's byte offset into a line anchor.
      std::size_t line = 1, column = 1;
      for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
          ++line;
          column = 1;
        } else {
          ++column;
        }
      }
      throw ConfigError("config:" + std::to_string(line) + ":" + std::to_string(column) +
                        ": " + e.what());
    }
    if (!root.is_object()) throw ConfigError("config: top level must be an object");

    RunSpec spec;
    spec.net = parse_mlp_spec(detail::block(root, "net"), "net");
    {
      detail::BlockReader r(detail::block(root, "data"), "data");
      spec.data.samples = r.count("samples", spec.data.samples);
      spec.data.features = r.count("features", spec.data.features);
      spec.data.classes = r.count("classes", spec.data.classes);
      spec.data.spread = r.number("spread", spec.data.spread);
      spec.data.seed = r.seed("seed", spec.data.seed);
      r.finish();
      if (spec.data.samples == 0) throw ConfigError("data.samples: must be positive");
      if (spec.data.spread <= 0.0) throw ConfigError("data.spread: must be positive");
      if (spec.data.features != spec.net.dims.front()) {
        throw ConfigError("data.features: must equal the first entry of net.dims");
      }
      if (spec.data.classes != spec.net.dims.back()) {
        throw ConfigError("data.classes: must equal the last entry of net.dims");
      }
    }
    {
      detail::BlockReader r(detail::block(root, "run"), "run");
      spec.run.lambda = r.number("lambda", 0.5);
      spec.run.epochs_pretrain = r.integer("epochs_pretrain", 25);
      spec.run.epochs_search = r.integer("epochs_search", 20);
      spec.run.epochs_finetune = r.integer("epochs_finetune", 10);
      spec.run.lr_pretrain = r.number("lr_pretrain", 0.15);
      spec.run.lr_search = r.number("lr_search", 0.02);
      spec.run.lr_finetune = r.number("lr_finetune", 0.05);
      spec.run.momentum = r.number("momentum", 0.9);
      spec.run.nesterov = r.boolean("nesterov", false);
      spec.run.batch_size = r.count("batch_size", 32);
      spec.run.seed = r.seed("seed", 1);
      r.finish();
      // The network block owns these; the run config mirrors it so the
      // trainer's consistency check cannot be tripped from a file.
      spec.run.ladder_bits = spec.net.ladder.bits();
      spec.run.group_size = spec.net.group_size;
      spec.run.weight_normalization = spec.net.weight_normalization;
      if (spec.run.lambda < 0.0) throw ConfigError("run.lambda: must be >= 0");
      if (spec.run.epochs_pretrain < 1 || spec.run.epochs_search < 1 ||
          spec.run.epochs_finetune < 1) {
        throw ConfigError("run.epochs_*: every phase needs at least one epoch");
      }
      if (spec.run.lr_pretrain <= 0.0 || spec.run.lr_search <= 0.0 ||
          spec.run.lr_finetune <= 0.0) {
        throw ConfigError("run.lr_*: learning rates must be positive");
      }
      if (spec.run.momentum < 0.0 || spec.run.momentum >= 1.0) {
        throw ConfigError("run.momentum: must be in [0, 1)");
      }
      if (spec.run.batch_size == 0) throw ConfigError("run.batch_size: must be positive");
    }
    {
      detail::BlockReader r(detail::block(root, "oracle"), "oracle");
      spec.oracle.finetune_steps = r.integer("finetune_steps", 50);
      spec.oracle.lr = r.number("lr", 0.05);
      spec.oracle.jobs = r.count("jobs", 1);
      spec.oracle.max_configs = r.count("max_configs", 100000);
      r.finish();
      if (spec.oracle.finetune_steps < 0) {
        throw ConfigError("oracle.finetune_steps: must be >= 0");
      }
      if (spec.oracle.lr <= 0.0) throw ConfigError("oracle.lr: must be positive");
    }
    {
      detail::BlockReader r(detail::block(root, "prop1"), "prop1");
      spec.prop1.samples = r.count("samples", spec.prop1.samples);
      spec.prop1.dimension = r.count("dimension", spec.prop1.dimension);
      spec.prop1.noise_std = r.number("noise_std", spec.prop1.noise_std);
      spec.prop1.steps = r.integer("steps", spec.prop1.steps);
      spec.prop1.lr = r.number("lr", spec.prop1.lr);
      spec.prop1.seeds = r.seed_array("seeds", spec.prop1.seeds);
      const std::vector<int> ladder = r.int_array("ladder", spec.prop1.ladder.bits());
      r.finish();
      try {
        spec.prop1.ladder = BitLadder::of(ladder);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("prop1.ladder: ") + e.what());
      }
      if (spec.prop1.samples == 0 || spec.prop1.dimension == 0) {
        throw ConfigError("prop1.samples/dimension: must be positive");
      }
      if (spec.prop1.noise_std < 0.0) throw ConfigError("prop1.noise_std: must be >= 0");
      if (spec.prop1.steps < 1) throw ConfigError("prop1.steps: must be >= 1");
      if (spec.prop1.lr <= 0.0) throw ConfigError("prop1.lr: must be positive");
      if (spec.prop1.seeds.empty()) throw ConfigError("prop1.seeds: must not be empty");
    }
    {
      detail::BlockReader r(detail::block(root, "sweep"), "sweep");
      spec.sweep_lambdas = r.number_array("lambdas", spec.sweep_lambdas);
      r.finish();
      if (spec.sweep_lambdas.empty()) throw ConfigError("sweep.lambdas: must not be empty");
      for (double l : spec.sweep_lambdas) {
        if (l < 0.0) throw ConfigError("sweep.lambdas: must be >= 0");
      }
    }

    const char* known[] = {"net", "data", "run", "oracle", "prop1", "sweep"};
    for (const auto& item : root.items()) {
      bool ok = false;
      for (const char* k : known) ok = ok || item.key() == k;
      if (!ok) throw ConfigError(item.key() + ": unknown top-level block");
    }
    return spec;
  }

  Dataset make_dataset() const {
    Rng rng(data.seed);
    return make_blobs(data.samples, data.features, data.classes, rng, data.spread);
  }

  RegressionTask make_prop1_task(std::uint64_t task_seed) const {
    Rng rng(task_seed);
    return make_regression(prop1.samples, prop1.dimension, prop1.noise_std, rng);
  }

  // The fully resolved view a manifest embeds: every field explicit, so a
  // rerun needs nothing but this object and the command line it records.
  nlohmann::json resolved() const {
    nlohmann::json out;
    out["net"] = {{"dims", net.dims},
                  {"group_size", net.group_size},
                  {"ladder", net.ladder.bits()},
                  {"weight_normalization", net.weight_normalization}};
    if (net.head_bits) {
      out["net"]["head_bits"] = *net.head_bits;
    } else {
      out["net"]["head_bits"] = nullptr;
    }
    out["data"] = {{"samples", data.samples}, {"features", data.features},
                   {"classes", data.classes}, {"spread", data.spread},
                   {"seed", data.seed}};
    out["run"] = {{"lambda", run.lambda},
                  {"epochs_pretrain", run.epochs_pretrain},
                  {"epochs_search", run.epochs_search},
                  {"epochs_finetune", run.epochs_finetune},
                  {"lr_pretrain", run.lr_pretrain},
                  {"lr_search", run.lr_search},
                  {"lr_finetune", run.lr_finetune},
                  {"momentum", run.momentum},
                  {"nesterov", run.nesterov},
                  {"batch_size", run.batch_size},
                  {"seed", run.seed}};
    out["oracle"] = {{"finetune_steps", oracle.finetune_steps},
                     {"lr", oracle.lr},
                     {"jobs", oracle.jobs},
                     {"max_configs", oracle.max_configs}};
    out["prop1"] = {{"samples", prop1.samples},   {"dimension", prop1.dimension},
                    {"noise_std", prop1.noise_std}, {"steps", prop1.steps},
                    {"lr", prop1.lr},             {"seeds", prop1.seeds},
                    {"ladder", prop1.ladder.bits()}};
    out["sweep"] = {{"lambdas", sweep_lambdas}};
    return out;
  }
};

// Reads a stored layer configuration (the search's config.json artifact).
inline CompressionConfig parse_compression_config(const nlohmann::json& root,
                                                  const std::string& path) {
  const auto it = root.find("layers");
  if (it == root.end() || !it->is_array()) {
    throw ConfigError(path + ".layers: must be an array");
  }
  CompressionConfig cfg;
  for (std::size_t i = 0; i < it->size(); ++i) {
    detail::BlockReader r((*it)[i], path + ".layers[" + std::to_string(i) + "]");
    LayerConfig lc;
    lc.name = r.text("name");
    lc.w_bits = r.integer("w_bits", 0);
    lc.a_bits = r.integer("a_bits", 0);
    lc.kept_groups = r.int_array("kept_groups", {});
    r.finish();
    if (lc.w_bits < 1 || lc.a_bits < 1) {
      throw ConfigError(r.at("w_bits") + ": bitwidths must be >= 1");
    }
    cfg.layers.push_back(std::move(lc));
  }
  return cfg;
}

}  // namespace sbs
