#include <doctest.h>

#include "fixtures.hpp"
#include "pace/config.hpp"
#include "pace/error.hpp"

#include <fstream>
#include <functional>

using namespace pace;
using nlohmann::json;

namespace {

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
    return e.what();
  }
  FAIL("no error thrown");
  return {};
}

bool mentions(const std::string& message, const std::string& needle) {
  return message.find(needle) != std::string::npos;
}

json simulate_json() {
  return json::parse(R"({"generator": {"alpha": 0.5, "adaptive": true, "effect_op": "multiply",
                                       "effect_sign": "subtracted", "seed": 11,
                                       "fully_synthetic": {"n": 30, "T": 20, "p": 3}}})");
}

}  // namespace

TEST_CASE("simulate config parses every field") {
  const SimulateConfig c = parse_simulate_config(simulate_json());
  CHECK(c.generator.alpha == 0.5);
  CHECK(c.generator.adaptive);
  CHECK(c.generator.effect_op == EffectOp::Multiply);
  CHECK(c.generator.effect_sign == EffectSign::Subtracted);
  CHECK(c.generator.seed == 11);
  REQUIRE(c.generator.fully_synthetic);
  CHECK(c.generator.fully_synthetic->n == 30);
  CHECK(c.generator.fully_synthetic->T == 20);
  CHECK(c.generator.fully_synthetic->p == 3);
  CHECK(c.generator.fully_synthetic->rank_star == FullySyntheticConfig{}.rank_star);
  CHECK_FALSE(c.baseline);
}

TEST_CASE("config errors name the key path") {
  json j = simulate_json();
  j["generator"].erase("alpha");
  CHECK(mentions(config_error([&] { parse_simulate_config(j); }), "generator.alpha: missing required key"));

  j = simulate_json();
  j["generator"]["bogus"] = 1;
  CHECK(mentions(config_error([&] { parse_simulate_config(j); }), "generator.bogus: unknown key"));

  j = simulate_json();
  j["generator"]["fully_synthetic"]["rank"] = 2;
  CHECK(mentions(config_error([&] { parse_simulate_config(j); }), "generator.fully_synthetic.rank: unknown key"));

  j = simulate_json();
  j["generator"]["alpha"] = "half";
  CHECK(mentions(config_error([&] { parse_simulate_config(j); }), "generator.alpha: has the wrong type"));

  j = simulate_json();
  j["generator"]["effect_op"] = "divide";
  const std::string op = config_error([&] { parse_simulate_config(j); });
  CHECK(mentions(op, "generator.effect_op"));
  CHECK(op.find("ConfigError") == op.rfind("ConfigError"));

  j = simulate_json();
  j["generator"].erase("fully_synthetic");
  CHECK(mentions(config_error([&] { parse_simulate_config(j); }), "baseline"));

  j = json::parse(R"({"grid": {"alpha": [0.25], "fully_synthetic": {}}, "estimator": {"max_leaves": 0}})");
  CHECK(mentions(config_error([&] { parse_benchmark_config(j); }), "estimator.max_leaves"));

  j = json::parse(R"({"grid": {"fully_synthetic": {}}, "estimator": {"fair_split_pi": 0.5}})");
  CHECK(mentions(config_error([&] { parse_benchmark_config(j); }), "fair_split_pi"));

  j = json::parse(R"({"grid": {"alpha": [1.5], "fully_synthetic": {}}})");
  CHECK(mentions(config_error([&] { parse_benchmark_config(j); }), "alpha"));

  j = json::parse(R"({"grid": {"fully_synthetic": {}}, "methods": []})");
  CHECK(mentions(config_error([&] { parse_benchmark_config(j); }), "methods"));
}

TEST_CASE("benchmark config fills the grid and resolves relative paths") {
  const json j = json::parse(R"({
    "grid": {"alpha": [0.05, 1.0], "adaptive": [false, true], "effect_op": ["add", "multiply"],
             "instances_per_cell": 3, "seed": 9},
    "methods": ["pace"],
    "estimator": {"max_leaves": 8, "target_rank": 3, "alpha_reg": 0.2, "fair_split_pi": 1.5},
    "baseline": {"outcomes": "o.csv", "covariates": ["x.csv"]},
    "external": "/abs/scores.csv"})");
  const BenchmarkConfig c = parse_benchmark_config(j, "/data/run");
  CHECK(c.grid.alphas == std::vector<double>{0.05, 1.0});
  CHECK(c.grid.adaptive == std::vector<bool>{false, true});
  CHECK(c.grid.effect_ops == std::vector<EffectOp>{EffectOp::Add, EffectOp::Multiply});
  CHECK(c.grid.instances_per_cell == 3);
  CHECK(c.grid.master_seed == 9);
  CHECK(c.grid.methods == std::vector<std::string>{"pace"});
  CHECK(c.grid.max_leaves == 8);
  CHECK(c.grid.target_rank == 3);
  CHECK(c.grid.constraints.alpha == 0.2);
  CHECK(c.grid.constraints.fair_split_pi == 1.5);
  CHECK_FALSE(c.grid.fully_synthetic);
  REQUIRE(c.baseline);
  CHECK(c.baseline->outcomes == std::filesystem::path("/data/run/o.csv"));
  CHECK(c.baseline->covariates.front() == std::filesystem::path("/data/run/x.csv"));
  REQUIRE(c.external);
  CHECK(*c.external == std::filesystem::path("/abs/scores.csv"));
}

TEST_CASE("config files: invalid JSON and missing files") {
  fixture::TempDir dir("config");
  {
    std::ofstream out(dir / "bad.json");
    out << "{\"generator\": ";
  }
  CHECK(mentions(config_error([&] { load_simulate_config(dir / "bad.json"); }), "invalid JSON"));
  try {
    load_simulate_config(dir / "absent.json");
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IoError);
  }
}
