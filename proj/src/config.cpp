#include "pace/config.hpp"

#include "pace/error.hpp"

#include <fstream>
#include <set>

namespace pace {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::ConfigError, path + ": " + what);
}

// Object view that records which keys were read so leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const json& at(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) fail(key_path(key), "missing required key");
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key) {
    const json& v = at(key);
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      fail(key_path(key), "has the wrong type");
    }
  }

  template <class T>
  T get_or(const std::string& key, T fallback) {
    seen_.insert(key);
    return has(key) ? get<T>(key) : fallback;
  }

  Section child(const std::string& key) { return Section(at(key), key_path(key)); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(key_path(k), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
auto with_path(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ConfigError) throw;
    std::string msg = e.what();
    const std::string prefix = std::string(to_string(ErrorCode::ConfigError)) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
    fail(path, msg);
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() && !base.empty() ? base / path : path;
}

FullySyntheticConfig parse_fully_synthetic(Section s) {
  FullySyntheticConfig f;
  f.n = s.get_or<Eigen::Index>("n", f.n);
  f.T = s.get_or<Eigen::Index>("T", f.T);
  f.p = s.get_or<int>("p", f.p);
  f.rank_star = s.get_or<int>("rank_star", f.rank_star);
  f.noise_sigma = s.get_or<double>("noise_sigma", f.noise_sigma);
  if (s.has("covariate_scheme")) {
    const auto v = s.get<std::string>("covariate_scheme");
    f.covariate_scheme = with_path(s.key_path("covariate_scheme"), [&] { return parse_covariate_scheme(v); });
  }
  s.finish();
  return f;
}

CsvPanelPaths parse_baseline(Section s, const std::filesystem::path& base) {
  CsvPanelPaths p;
  p.outcomes = resolve(base, s.get<std::string>("outcomes"));
  for (const auto& c : s.get_or<std::vector<std::string>>("covariates", {})) p.covariates.push_back(resolve(base, c));
  for (const auto& t : s.get_or<std::vector<std::string>>("treatments", {})) p.treatments.push_back(resolve(base, t));
  s.finish();
  return p;
}

template <class T>
void check_positive(const std::string& path, T v) {
  if (!(v > 0)) fail(path, "must be positive");
}

}  // namespace

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": invalid JSON: " + e.what());
  }
}

SimulateConfig parse_simulate_config(const json& j, const std::filesystem::path& base_dir) {
  Section root(j, "");
  SimulateConfig cfg;
  Section g = root.child("generator");
  GeneratorConfig& gen = cfg.generator;
  gen.alpha = g.get<double>("alpha");
  gen.adaptive = g.get_or<bool>("adaptive", gen.adaptive);
  if (g.has("effect_op")) {
    const auto v = g.get<std::string>("effect_op");
    gen.effect_op = with_path("generator.effect_op", [&] { return parse_effect_op(v); });
  }
  if (g.has("effect_sign")) {
    const auto v = g.get<std::string>("effect_sign");
    gen.effect_sign = with_path("generator.effect_sign", [&] { return parse_effect_sign(v); });
  }
  gen.target_ratio = g.get_or<double>("target_ratio", gen.target_ratio);
  gen.seed = g.get_or<std::uint64_t>("seed", gen.seed);
  if (g.has("fully_synthetic")) gen.fully_synthetic = parse_fully_synthetic(g.child("fully_synthetic"));
  g.finish();
  if (root.has("baseline")) cfg.baseline = parse_baseline(root.child("baseline"), base_dir);
  root.finish();

  if (cfg.generator.fully_synthetic && cfg.baseline) fail("baseline", "cannot be combined with generator.fully_synthetic");
  if (!cfg.generator.fully_synthetic && !cfg.baseline) fail("baseline", "required unless generator.fully_synthetic is set");
  gen.check();
  return cfg;
}

BenchmarkConfig parse_benchmark_config(const json& j, const std::filesystem::path& base_dir) {
  Section root(j, "");
  BenchmarkConfig cfg;
  BenchmarkGrid& grid = cfg.grid;

  Section g = root.child("grid");
  grid.alphas = g.get_or<std::vector<double>>("alpha", grid.alphas);
  grid.adaptive = g.get_or<std::vector<bool>>("adaptive", grid.adaptive);
  if (g.has("effect_op")) {
    grid.effect_ops.clear();
    for (const auto& v : g.get<std::vector<std::string>>("effect_op")) {
      grid.effect_ops.push_back(with_path("grid.effect_op", [&] { return parse_effect_op(v); }));
    }
  }
  if (g.has("effect_sign")) {
    const auto v = g.get<std::string>("effect_sign");
    grid.effect_sign = with_path("grid.effect_sign", [&] { return parse_effect_sign(v); });
  }
  grid.target_ratio = g.get_or<double>("target_ratio", grid.target_ratio);
  grid.instances_per_cell = g.get_or<int>("instances_per_cell", grid.instances_per_cell);
  grid.master_seed = g.get_or<std::uint64_t>("seed", grid.master_seed);
  if (g.has("fully_synthetic")) grid.fully_synthetic = parse_fully_synthetic(g.child("fully_synthetic"));
  g.finish();

  grid.methods = root.get_or<std::vector<std::string>>("methods", grid.methods);
  if (root.has("estimator")) {
    Section e = root.child("estimator");
    grid.max_leaves = e.get_or<int>("max_leaves", grid.max_leaves);
    grid.target_rank = e.get_or<int>("target_rank", grid.target_rank);
    grid.constraints.alpha = e.get_or<double>("alpha_reg", grid.constraints.alpha);
    grid.constraints.min_treated_per_side = e.get_or<int>("min_treated_per_side", grid.constraints.min_treated_per_side);
    if (e.has("fair_split_pi")) grid.constraints.fair_split_pi = e.get<double>("fair_split_pi");
    e.finish();
    check_positive("estimator.max_leaves", grid.max_leaves);
    check_positive("estimator.target_rank", grid.target_rank);
  }
  if (root.has("baseline")) cfg.baseline = parse_baseline(root.child("baseline"), base_dir);
  if (root.has("external")) cfg.external = resolve(base_dir, root.get<std::string>("external"));
  root.finish();

  if (grid.fully_synthetic && cfg.baseline) fail("baseline", "cannot be combined with grid.fully_synthetic");
  if (!grid.fully_synthetic && !cfg.baseline) fail("baseline", "required unless grid.fully_synthetic is set");
  grid.check();
  return cfg;
}

SimulateConfig load_simulate_config(const std::filesystem::path& path) {
  return parse_simulate_config(read_json_file(path), path.parent_path());
}

BenchmarkConfig load_benchmark_config(const std::filesystem::path& path) {
  return parse_benchmark_config(read_json_file(path), path.parent_path());
}

}  // namespace pace
