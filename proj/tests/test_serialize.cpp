#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include "helpers.hpp"
#include "sbs/config.hpp"
#include "sbs/model.hpp"
#include "sbs/serialize.hpp"

using namespace sbs;
using sbs::test::bitwise_equal;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("sbs_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

MlpSpec small_spec() {
  MlpSpec spec;
  spec.dims = {4, 6, 3};
  spec.group_size = 2;
  spec.ladder = BitLadder::of({2, 4});
  spec.head_bits = 8;
  return spec;
}

}  // namespace

TEST_CASE("sha1 matches the published test vectors") {
  CHECK(Sha1::of("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(Sha1::of("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
  CHECK(Sha1::of("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
        "84983e441c3bd26ebaae4aa1f95129e5e54670f1");
  // Incremental updates agree with one-shot hashing across a chunk boundary.
  Sha1 h;
  const std::string million(1000, 'a');
  for (int i = 0; i < 1000; ++i) h.update(million.data(), million.size());
  CHECK(h.hex_digest() == "34aa973cd4c4daa4f61eeb2bdbad27316534016f");
}

TEST_CASE("double formatting round-trips and is minimal") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(64.0) == "64");
  CHECK(format_double(-0.25) == "-0.25");
  CHECK(format_double(1.0 / 3.0) == "0.3333333333333333");
  const double awkward = 0.1 + 0.2;
  CHECK(std::stod(format_double(awkward)) == awkward);
}

TEST_CASE("csv writer quotes exactly the fields that need it") {
  CsvWriter csv({"a", "b"});
  csv.row({"plain", "with,comma"});
  csv.row({"with \"quote\"", "line\nbreak"});
  CHECK(csv.str() ==
        "a,b\r\n"
        "plain,\"with,comma\"\r\n"
        "\"with \"\"quote\"\"\",\"line\nbreak\"\r\n");
  CHECK_THROWS_AS(csv.row({"too", "many", "cells"}), std::invalid_argument);
}

TEST_CASE("atomic writes leave no temp files and replace content") {
  const fs::path dir = temp_dir("atomic");
  const fs::path target = dir / "file.txt";
  write_file_atomic(target, "first");
  write_file_atomic(target, "second");
  CHECK(read_file(target) == "second");
  std::size_t entries = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    ++entries;
    CHECK(e.path().filename() == "file.txt");
  }
  CHECK(entries == 1);
}

TEST_CASE("checkpoints restore every parameter bit for bit") {
  const fs::path dir = temp_dir("ckpt");
  Rng rng(7);
  QuantMlp model(small_spec(), rng);
  save_checkpoint(model, dir);

  Rng other(8);
  QuantMlp loaded(small_spec(), other);
  load_checkpoint(loaded, dir);
  const auto& a = model.params();
  const auto& b = loaded.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    REQUIRE(a[i].value.size() == b[i].value.size());
    CHECK(bitwise_equal(a[i].value, b[i].value));
  }
}

TEST_CASE("checkpoint loading rejects corrupted blobs and wrong shapes") {
  const fs::path dir = temp_dir("ckpt_bad");
  Rng rng(7);
  QuantMlp model(small_spec(), rng);
  save_checkpoint(model, dir);

  SECTION("flipped byte fails the hash check") {
    std::string blob = read_file(dir / "checkpoint.bin");
    blob[3] = static_cast<char>(blob[3] ^ 0x40);
    write_file_atomic(dir / "checkpoint.bin", blob);
    Rng other(8);
    QuantMlp loaded(small_spec(), other);
    CHECK_THROWS_WITH(load_checkpoint(loaded, dir),
                      Catch::Matchers::ContainsSubstring("does not match"));
  }
  SECTION("a different architecture refuses the restore") {
    MlpSpec wide = small_spec();
    wide.dims = {4, 8, 3};
    Rng other(8);
    QuantMlp loaded(wide, other);
    CHECK_THROWS_AS(load_checkpoint(loaded, dir), std::runtime_error);
  }
}

TEST_CASE("run configs parse with defaults and reject bad fields") {
  SECTION("empty object yields the documented defaults") {
    const RunSpec spec = RunSpec::parse("{}");
    CHECK(spec.net.dims == std::vector<std::size_t>{4, 8, 8, 3});
    CHECK(spec.net.ladder.bits() == std::vector<int>{2, 4});
    CHECK(spec.run.lambda == 0.5);
    CHECK(spec.run.seed == 1);
    CHECK(spec.data.samples == 96);
    CHECK(spec.prop1.ladder.bits() == std::vector<int>{2, 4, 8});
    CHECK(spec.sweep_lambdas == std::vector<double>{0.0, 0.01, 0.1, 1.0});
  }
  SECTION("run block mirrors the net block's shared fields") {
    const RunSpec spec =
        RunSpec::parse(R"({"net": {"ladder": [3, 6], "group_size": 4}})");
    CHECK(spec.run.ladder_bits == std::vector<int>{3, 6});
    CHECK(spec.run.group_size == 4);
  }
  SECTION("error messages name the offending field") {
    CHECK_THROWS_WITH(RunSpec::parse(R"({"run": {"lambda": -2}})"),
                      Catch::Matchers::ContainsSubstring("run.lambda"));
    CHECK_THROWS_WITH(RunSpec::parse(R"({"run": {"turbo": true}})"),
                      Catch::Matchers::ContainsSubstring("run.turbo"));
    CHECK_THROWS_WITH(RunSpec::parse(R"({"warp": 9})"),
                      Catch::Matchers::ContainsSubstring("warp"));
    CHECK_THROWS_WITH(RunSpec::parse(R"({"data": {"samples": -5}})"),
                      Catch::Matchers::ContainsSubstring("data.samples"));
    CHECK_THROWS_WITH(RunSpec::parse(R"({"net": {"ladder": [2, 3]}})"),
                      Catch::Matchers::ContainsSubstring("net"));
    CHECK_THROWS_WITH(
        RunSpec::parse(R"({"data": {"features": 7}})"),
        Catch::Matchers::ContainsSubstring("data.features"));
  }
  SECTION("syntax errors carry a line anchor") {
    CHECK_THROWS_WITH(RunSpec::parse("{\n  \"net\": {,}\n}"),
                      Catch::Matchers::ContainsSubstring("config:2:"));
  }
  SECTION("seed zero is accepted and negative seeds are not") {
    CHECK(RunSpec::parse(R"({"run": {"seed": 0}})").run.seed == 0);
    CHECK_THROWS_AS(RunSpec::parse(R"({"run": {"seed": -1}})"), ConfigError);
  }
}

TEST_CASE("resolved configs reparse to the same resolved form") {
  const RunSpec spec = RunSpec::parse(R"({"run": {"lambda": 0.25, "seed": 12}})");
  nlohmann::json full = spec.resolved();
  // resolved() nests sweep lambdas under "sweep.lambdas" exactly like the
  // input format, so a manifest's config block is itself a valid config.
  const RunSpec round = RunSpec::parse(full.dump());
  CHECK(round.resolved() == full);
}

TEST_CASE("stored layer configs parse back into compression configs") {
  CompressionConfig cfg;
  cfg.layers.push_back({"fc1", 2, 4, {0, 1, 3}});
  cfg.layers.push_back({"fc2", 8, 8, {0}});
  const nlohmann::json j = to_json(cfg);
  const CompressionConfig back = parse_compression_config(j, "config");
  REQUIRE(back.layers.size() == 2);
  CHECK(back.layers[0].name == "fc1");
  CHECK(back.layers[0].w_bits == 2);
  CHECK(back.layers[0].a_bits == 4);
  CHECK(back.layers[0].kept_groups == std::vector<int>{0, 1, 3});
  CHECK(back.layers[1].name == "fc2");

  nlohmann::json bad = j;
  bad["layers"][0]["w_bits"] = 0;
  CHECK_THROWS_AS(parse_compression_config(bad, "config"), ConfigError);
  bad = j;
  bad["layers"][0]["volume"] = 11;
  CHECK_THROWS_WITH(parse_compression_config(bad, "config"),
                    Catch::Matchers::ContainsSubstring("volume"));
}
