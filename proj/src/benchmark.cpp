#include "pace/benchmark.hpp"

#include "pace/debias.hpp"
#include "pace/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace pace {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool known_method(const std::string& m) { return m == "pace" || m == "mcnnm"; }

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::string& s) {
  if (s.empty() || s == "nan" || s == "NaN" || s == "NA") return kNaN;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw Error(ErrorCode::ParseError, "not a number: '" + s + "'");
  }
  if (used != s.size()) throw Error(ErrorCode::ParseError, "not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct Scores {
  double nmae_all = kNaN;
  double nmae_treated = kNaN;
};

Scores run_method(const std::string& method, const Instance& inst, const BenchmarkGrid& grid) {
  const Matrix& w = inst.panel.treatments[0];
  const Matrix& truth = inst.truth.effect[0];
  Scores s;
  if (method == "pace") {
    const EffectEstimate est = estimate_effects(inst.panel, grid.max_leaves, grid.target_rank, grid.constraints);
    const Matrix e = effect_matrix(est, 0);
    s.nmae_all = nmae(e, truth);
    s.nmae_treated = nmae(e, truth, &w);
  } else {
    McnnmOptions opt;
    opt.target_rank = grid.target_rank;
    const McnnmResult res = mcnnm(inst.panel.outcomes, w, opt);
    s.nmae_treated = nmae(res.effect, truth, &w);
  }
  return s;
}

std::string error_tag(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const Error& err) {
    return std::string(to_string(err.code()));
  } catch (const std::exception&) {
    return "Exception";
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kNaN : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? kNaN : 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void BenchmarkGrid::check() const {
  if (alphas.empty()) throw Error(ErrorCode::ConfigError, "grid.alpha must not be empty");
  for (double a : alphas) {
    if (!(a > 0.0 && a <= 1.0)) throw Error(ErrorCode::ConfigError, "grid.alpha values must lie in (0, 1]");
  }
  if (adaptive.empty()) throw Error(ErrorCode::ConfigError, "grid.adaptive must not be empty");
  if (effect_ops.empty()) throw Error(ErrorCode::ConfigError, "grid.effect_op must not be empty");
  if (!(target_ratio > 0.0)) throw Error(ErrorCode::ConfigError, "grid.target_ratio must be positive");
  if (instances_per_cell < 1) throw Error(ErrorCode::ConfigError, "grid.instances_per_cell must be >= 1");
  if (methods.empty()) throw Error(ErrorCode::ConfigError, "methods must not be empty");
  for (const auto& m : methods) {
    if (!known_method(m)) throw Error(ErrorCode::ConfigError, "methods: unknown method '" + m + "'");
  }
  if (max_leaves < 1) throw Error(ErrorCode::ConfigError, "estimator.max_leaves must be >= 1");
  if (target_rank < 1) throw Error(ErrorCode::ConfigError, "estimator.target_rank must be >= 1");
  try {
    constraints.check();
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, std::string("estimator: ") + e.what());
  }
}

nlohmann::json BenchmarkGrid::to_json() const {
  nlohmann::json ops = nlohmann::json::array();
  for (EffectOp op : effect_ops) ops.push_back(to_string(op));
  nlohmann::json j = {{"alpha", alphas},
                      {"adaptive", adaptive},
                      {"effect_op", ops},
                      {"effect_sign", to_string(effect_sign)},
                      {"target_ratio", target_ratio},
                      {"instances_per_cell", instances_per_cell},
                      {"seed", master_seed},
                      {"methods", methods},
                      {"max_leaves", max_leaves},
                      {"target_rank", target_rank},
                      {"constraints", constraints.to_json()}};
  if (fully_synthetic) {
    GeneratorConfig g;
    g.fully_synthetic = fully_synthetic;
    j["fully_synthetic"] = g.to_json()["fully_synthetic"];
  }
  return j;
}

BenchmarkGrid BenchmarkGrid::paper() {
  BenchmarkGrid g;
  g.alphas = {0.05, 0.25, 0.5, 0.75, 1.0};
  g.adaptive = {false, true};
  g.effect_ops = {EffectOp::Add, EffectOp::Multiply};
  g.instances_per_cell = 200;
  return g;
}

std::vector<BenchmarkCell> expand_grid(const BenchmarkGrid& grid) {
  std::vector<BenchmarkCell> cells;
  for (double a : grid.alphas)
    for (bool ad : grid.adaptive)
      for (EffectOp op : grid.effect_ops) cells.push_back({cells.size(), a, ad, op});
  return cells;
}

std::string instance_id(std::size_t cell, int index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%03zu_i%04d", cell, index);
  return buf;
}

std::vector<BenchmarkRecord> run_benchmark(const BenchmarkGrid& grid, const BenchmarkOptions& options) {
  grid.check();
  if (!grid.fully_synthetic && !options.baseline) {
    throw Error(ErrorCode::ConfigError, "grid.fully_synthetic is unset and no baseline panel was given");
  }
  if (options.jobs < 1) throw Error(ErrorCode::ConfigError, "jobs must be >= 1");
  const auto cells = expand_grid(grid);
  const std::size_t per_cell = static_cast<std::size_t>(grid.instances_per_cell);
  const std::size_t num_methods = grid.methods.size();
  const long tasks = static_cast<long>(cells.size() * per_cell);
  std::vector<BenchmarkRecord> records(static_cast<std::size_t>(tasks) * num_methods);

#pragma omp parallel for schedule(dynamic) num_threads(options.jobs)
  for (long task = 0; task < tasks; ++task) {
    const auto& cell = cells[static_cast<std::size_t>(task) / per_cell];
    const int index = static_cast<int>(static_cast<std::size_t>(task) % per_cell);
    GeneratorConfig cfg;
    cfg.alpha = cell.alpha;
    cfg.adaptive = cell.adaptive;
    cfg.effect_op = cell.effect_op;
    cfg.effect_sign = grid.effect_sign;
    cfg.target_ratio = grid.target_ratio;
    cfg.seed = derive_seed(grid.master_seed, cell.index, static_cast<std::uint64_t>(index));
    cfg.fully_synthetic = grid.fully_synthetic;

    std::optional<Instance> inst;
    std::string gen_error;
    try {
      inst = generate_instance(cfg, grid.fully_synthetic ? nullptr : options.baseline);
    } catch (...) {
      gen_error = error_tag(std::current_exception());
    }
    for (std::size_t k = 0; k < num_methods; ++k) {
      BenchmarkRecord& r = records[static_cast<std::size_t>(task) * num_methods + k];
      r.instance_id = instance_id(cell.index, index);
      r.method = grid.methods[k];
      r.alpha = cell.alpha;
      r.adaptive = cell.adaptive;
      r.effect_op = to_string(cell.effect_op);
      r.seed = cfg.seed;
      r.nmae_all = kNaN;
      r.nmae_treated = kNaN;
      if (!inst) {
        r.error = gen_error;
        continue;
      }
      const auto start = std::chrono::steady_clock::now();
      try {
        const Scores s = run_method(r.method, *inst, grid);
        r.nmae_all = s.nmae_all;
        r.nmae_treated = s.nmae_treated;
      } catch (...) {
        r.error = error_tag(std::current_exception());
      }
      if (options.timing) r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  }
  sort_records(records);
  return records;
}

void sort_records(std::vector<BenchmarkRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const BenchmarkRecord& a, const BenchmarkRecord& b) {
    return std::tie(a.instance_id, a.method) < std::tie(b.instance_id, b.method);
  });
}

std::string results_csv(const std::vector<BenchmarkRecord>& records) {
  std::ostringstream os;
  os << "instance_id,method,alpha,adaptive,effect_op,seed,nmae_all,nmae_treated,wall_time,error\n";
  for (const auto& r : records) {
    os << r.instance_id << ',' << r.method << ',' << format_double(r.alpha) << ',' << (r.adaptive ? "true" : "false")
       << ',' << r.effect_op << ',' << r.seed << ',' << format_double(r.nmae_all) << ','
       << format_double(r.nmae_treated) << ',' << format_double(r.wall_time) << ',' << r.error << '\n';
  }
  return os.str();
}

void write_results_csv(const std::filesystem::path& path, const std::vector<BenchmarkRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << results_csv(records);
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

std::vector<BenchmarkRecord> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, path.string() + ": empty file");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* required : {"instance_id", "method"}) {
    if (!col.count(required)) throw Error(ErrorCode::ParseError, path.string() + ": missing column " + required);
  }
  if (!col.count("nmae_all") && !col.count("nmae_treated")) {
    throw Error(ErrorCode::ParseError, path.string() + ": needs nmae_all or nmae_treated");
  }
  std::vector<BenchmarkRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": wrong field count");
    }
    auto get = [&](const char* name) -> std::string { return col.count(name) ? f[col[name]] : std::string(); };
    BenchmarkRecord r;
    r.instance_id = get("instance_id");
    r.method = get("method");
    if (col.count("alpha")) r.alpha = parse_double(get("alpha"));
    r.adaptive = get("adaptive") == "true" || get("adaptive") == "1";
    r.effect_op = get("effect_op");
    if (!get("seed").empty()) r.seed = std::stoull(get("seed"));
    r.nmae_all = parse_double(get("nmae_all"));
    r.nmae_treated = parse_double(get("nmae_treated"));
    if (col.count("wall_time")) r.wall_time = parse_double(get("wall_time"));
    r.error = get("error");
    out.push_back(std::move(r));
  }
  return out;
}

std::size_t merge_external(std::vector<BenchmarkRecord>& records, const std::vector<BenchmarkRecord>& external) {
  std::map<std::string, BenchmarkRecord> by_instance;
  for (const auto& r : records) by_instance.emplace(r.instance_id, r);
  std::size_t dropped = 0;
  for (const auto& e : external) {
    auto it = by_instance.find(e.instance_id);
    if (it == by_instance.end()) {
      ++dropped;
      continue;
    }
    BenchmarkRecord r = e;
    r.alpha = it->second.alpha;
    r.adaptive = it->second.adaptive;
    r.effect_op = it->second.effect_op;
    r.seed = it->second.seed;
    records.push_back(std::move(r));
  }
  sort_records(records);
  return dropped;
}

nlohmann::json aggregate(const std::vector<BenchmarkRecord>& records) {
  using CellKey = std::tuple<double, bool, std::string>;
  // cell -> instance -> method -> record
  std::map<CellKey, std::map<std::string, std::map<std::string, const BenchmarkRecord*>>> cells;
  for (const auto& r : records) cells[{r.alpha, r.adaptive, r.effect_op}][r.instance_id][r.method] = &r;

  nlohmann::json out = nlohmann::json::array();
  for (const auto& [key, instances] : cells) {
    std::set<std::string> methods;
    for (const auto& [id, by_method] : instances)
      for (const auto& [m, r] : by_method) methods.insert(m);

    nlohmann::json cell = {{"alpha", std::get<0>(key)},
                           {"adaptive", std::get<1>(key)},
                           {"effect_op", std::get<2>(key)},
                           {"instances", instances.size()}};
    nlohmann::json stats = nlohmann::json::object();
    for (const auto& m : methods) {
      std::vector<double> all, treated;
      std::size_t failures = 0;
      for (const auto& [id, by_method] : instances) {
        auto it = by_method.find(m);
        if (it == by_method.end()) continue;
        if (!it->second->error.empty()) ++failures;
        if (std::isfinite(it->second->nmae_all)) all.push_back(it->second->nmae_all);
        if (std::isfinite(it->second->nmae_treated)) treated.push_back(it->second->nmae_treated);
      }
      stats[m] = {{"nmae_all", {{"mean", finite_or_null(mean_of(all))}, {"std", finite_or_null(std_of(all))}, {"n", all.size()}}},
                  {"nmae_treated",
                   {{"mean", finite_or_null(mean_of(treated))}, {"std", finite_or_null(std_of(treated))}, {"n", treated.size()}}},
                  {"failures", failures}};
    }
    cell["methods"] = stats;

    nlohmann::json winners = nlohmann::json::object();
    for (const char* metric : {"nmae_all", "nmae_treated"}) {
      std::map<std::string, double> share;
      for (const auto& m : methods) share[m] = 0.0;
      std::size_t scored = 0;
      for (const auto& [id, by_method] : instances) {
        double best = std::numeric_limits<double>::infinity();
        std::vector<std::string> tied;
        for (const auto& [m, r] : by_method) {
          const double v = std::string(metric) == "nmae_all" ? r->nmae_all : r->nmae_treated;
          if (!std::isfinite(v)) continue;
          if (v < best) {
            best = v;
            tied = {m};
          } else if (v == best) {
            tied.push_back(m);
          }
        }
        if (tied.empty()) continue;
        ++scored;
        for (const auto& m : tied) share[m] += 1.0 / static_cast<double>(tied.size());
      }
      nlohmann::json w = {{"instances", scored}};
      nlohmann::json props = nlohmann::json::object();
      for (const auto& [m, s] : share) props[m] = scored ? s / static_cast<double>(scored) : 0.0;
      w["proportions"] = props;
      winners[metric] = w;
    }
    cell["winners"] = winners;
    out.push_back(cell);
  }
  return {{"cells", out}, {"records", records.size()}};
}

}  // namespace pace
