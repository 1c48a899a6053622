#include "pace/panel.hpp"
#include "pace/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace pace {

Vector Panel::covariate_vector(Eigen::Index unit, Eigen::Index time) const {
  Vector x(static_cast<Eigen::Index>(covariates.size()));
  for (std::size_t c = 0; c < covariates.size(); ++c) x(static_cast<Eigen::Index>(c)) = covariates[c](unit, time);
  return x;
}

void Panel::check() const {
  const auto n = units();
  const auto T = periods();
  if (n < 2 || T < 2) throw Error(ErrorCode::ShapeMismatch, "panel needs n >= 2 and T >= 2");
  if (covariates.empty()) throw Error(ErrorCode::ShapeMismatch, "panel needs at least one covariate");
  if (treatments.empty()) throw Error(ErrorCode::ShapeMismatch, "panel needs at least one treatment");
  for (const auto& x : covariates) {
    if (x.rows() != n || x.cols() != T) throw Error(ErrorCode::ShapeMismatch, "covariate dimensions differ from outcomes");
    if (!x.allFinite()) throw Error(ErrorCode::NonFiniteInput, "covariate entries must be finite");
  }
  for (const auto& w : treatments) {
    if (w.rows() != n || w.cols() != T) throw Error(ErrorCode::ShapeMismatch, "treatment dimensions differ from outcomes");
    if (((w.array() != 0.0) && (w.array() != 1.0)).any()) {
      throw Error(ErrorCode::InvalidTreatment, "treatment entries must be 0 or 1");
    }
  }
  if (!outcomes.allFinite()) throw Error(ErrorCode::NonFiniteInput, "outcome entries must be finite");
  if (!unit_ids.empty() && static_cast<Eigen::Index>(unit_ids.size()) != n) {
    throw Error(ErrorCode::ShapeMismatch, "unit id count differs from outcome rows");
  }
  if (!time_ids.empty() && static_cast<Eigen::Index>(time_ids.size()) != T) {
    throw Error(ErrorCode::ShapeMismatch, "time id count differs from outcome columns");
  }
}

Matrix GroundTruth::masked_effect(std::size_t treatment, const Matrix& mask) const {
  return effect.at(treatment).cwiseProduct(mask);
}

CovariateScaling CovariateScaling::fit(const Panel& panel) {
  CovariateScaling s;
  for (const auto& x : panel.covariates) {
    s.lo.push_back(x.minCoeff());
    s.hi.push_back(x.maxCoeff());
  }
  return s;
}

double CovariateScaling::to_unit(std::size_t c, double v) const {
  const double range = hi[c] - lo[c];
  return range > 0.0 ? (v - lo[c]) / range : 0.0;
}

double CovariateScaling::to_original(std::size_t c, double u) const {
  return lo[c] + u * (hi[c] - lo[c]);
}

std::vector<Matrix> normalized_covariates(const Panel& panel, const CovariateScaling& scaling) {
  std::vector<Matrix> out;
  out.reserve(panel.covariates.size());
  for (std::size_t c = 0; c < panel.covariates.size(); ++c) {
    const double range = scaling.hi[c] - scaling.lo[c];
    if (range > 0.0) {
      out.push_back((panel.covariates[c].array() - scaling.lo[c]) / range);
    } else {
      out.push_back(Matrix::Zero(panel.units(), panel.periods()));
    }
  }
  return out;
}

Panel append_time_covariate(const Panel& panel) {
  Panel out = panel;
  Matrix t(panel.units(), panel.periods());
  for (Eigen::Index j = 0; j < panel.periods(); ++j) t.col(j).setConstant(static_cast<double>(j));
  out.covariates.push_back(std::move(t));
  return out;
}

// --- CSV ingestion ---------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string::npos) {
      fields.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    fields.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return fields;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

struct LongTable {
  std::string path;
  std::vector<std::string> value_columns;
  std::vector<std::string> units;
  std::vector<std::string> times;
  std::vector<std::vector<double>> values;  // one row of values per record
};

LongTable read_long_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  LongTable table;
  table.path = path.string();
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, path.string() + ": empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
  auto header = split_row(line);
  if (header.size() < 3 || header[0] != "unit" || header[1] != "time") {
    throw Error(ErrorCode::ParseError, path.string() + ": header must start with unit,time");
  }
  table.value_columns.assign(header.begin() + 2, header.end());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_row(line);
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                             std::to_string(header.size()) + " fields");
    }
    std::vector<double> row;
    for (std::size_t c = 2; c < fields.size(); ++c) {
      auto v = parse_number(fields[c]);
      if (!v) {
        throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": bad number '" +
                                               fields[c] + "'");
      }
      row.push_back(*v);
    }
    table.units.push_back(fields[0]);
    table.times.push_back(fields[1]);
    table.values.push_back(std::move(row));
  }
  return table;
}

struct Index {
  std::vector<std::string> unit_ids;
  std::vector<std::string> time_ids;
  std::unordered_map<std::string, Eigen::Index> unit_pos;
  std::unordered_map<std::string, Eigen::Index> time_pos;
};

Index build_index(const LongTable& table) {
  Index idx;
  for (const auto& u : table.units) {
    if (idx.unit_pos.emplace(u, static_cast<Eigen::Index>(idx.unit_ids.size())).second) idx.unit_ids.push_back(u);
  }
  std::vector<std::string> times;
  std::unordered_map<std::string, bool> seen;
  for (const auto& t : table.times) {
    if (seen.emplace(t, true).second) times.push_back(t);
  }
  const bool numeric = std::all_of(times.begin(), times.end(), [](const std::string& t) { return parse_number(t).has_value(); });
  if (numeric) {
    std::stable_sort(times.begin(), times.end(),
                     [](const std::string& a, const std::string& b) { return *parse_number(a) < *parse_number(b); });
  } else {
    std::sort(times.begin(), times.end());
  }
  idx.time_ids = times;
  for (std::size_t j = 0; j < times.size(); ++j) idx.time_pos[times[j]] = static_cast<Eigen::Index>(j);
  return idx;
}

std::vector<Matrix> scatter(const LongTable& table, const Index& idx) {
  const auto n = static_cast<Eigen::Index>(idx.unit_ids.size());
  const auto T = static_cast<Eigen::Index>(idx.time_ids.size());
  const std::size_t width = table.value_columns.size();
  std::vector<Matrix> out(width, Matrix::Constant(n, T, std::numeric_limits<double>::quiet_NaN()));
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> seen = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n, T, false);
  for (std::size_t r = 0; r < table.units.size(); ++r) {
    auto u = idx.unit_pos.find(table.units[r]);
    auto t = idx.time_pos.find(table.times[r]);
    if (u == idx.unit_pos.end() || t == idx.time_pos.end()) {
      throw Error(ErrorCode::ShapeMismatch, table.path + ": cell (" + table.units[r] + "," + table.times[r] +
                                                ") is not part of the outcome panel");
    }
    if (seen(u->second, t->second)) {
      throw Error(ErrorCode::DuplicateEntry, table.path + ": cell (" + table.units[r] + "," + table.times[r] +
                                                 ") appears more than once");
    }
    seen(u->second, t->second) = true;
    for (std::size_t c = 0; c < width; ++c) out[c](u->second, t->second) = table.values[r][c];
  }
  for (Eigen::Index z = 0; z < n; ++z) {
    for (Eigen::Index t = 0; t < T; ++t) {
      if (!seen(z, t)) {
        throw Error(ErrorCode::MissingEntry, table.path + ": missing cell (\"" + idx.unit_ids[static_cast<std::size_t>(z)] +
                                                 "\"," + idx.time_ids[static_cast<std::size_t>(t)] + ")");
      }
    }
  }
  return out;
}

}  // namespace

Panel load_panel_csv(const CsvPanelPaths& paths) {
  const auto outcome_table = read_long_csv(paths.outcomes);
  if (outcome_table.value_columns.size() != 1) {
    throw Error(ErrorCode::ParseError, paths.outcomes.string() + ": outcome file must have header unit,time,value");
  }
  const Index idx = build_index(outcome_table);

  Panel panel;
  panel.unit_ids = idx.unit_ids;
  panel.time_ids = idx.time_ids;
  panel.outcomes = scatter(outcome_table, idx).front();

  for (const auto& p : paths.covariates) {
    auto table = read_long_csv(p);
    for (auto& m : scatter(table, idx)) panel.covariates.push_back(std::move(m));
  }
  for (const auto& p : paths.treatments) {
    auto table = read_long_csv(p);
    if (table.value_columns.size() != 1) {
      throw Error(ErrorCode::ParseError, p.string() + ": treatment file must have header unit,time,value");
    }
    auto w = scatter(table, idx).front();
    if (((w.array() != 0.0) && (w.array() != 1.0)).any()) {
      throw Error(ErrorCode::InvalidTreatment, p.string() + ": treatment values must be 0 or 1");
    }
    panel.treatments.push_back(std::move(w));
  }
  panel.check();
  return panel;
}

void write_long_csv(const std::filesystem::path& path, const Matrix& values, const std::vector<std::string>& unit_ids,
                    const std::vector<std::string>& time_ids) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "unit,time,value\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index z = 0; z < values.rows(); ++z) {
    for (Eigen::Index t = 0; t < values.cols(); ++t) {
      const std::string& u = unit_ids.empty() ? std::to_string(z) : unit_ids[static_cast<std::size_t>(z)];
      const std::string& tt = time_ids.empty() ? std::to_string(t) : time_ids[static_cast<std::size_t>(t)];
      out << u << ',' << tt << ',' << values(z, t) << '\n';
    }
  }
}

CsvPanelPaths write_panel_csv(const Panel& panel, const std::filesystem::path& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  CsvPanelPaths paths;
  paths.outcomes = dir / (prefix + "_outcomes.csv");
  write_long_csv(paths.outcomes, panel.outcomes, panel.unit_ids, panel.time_ids);
  for (std::size_t c = 0; c < panel.covariates.size(); ++c) {
    auto p = dir / (prefix + "_covariate_" + std::to_string(c) + ".csv");
    write_long_csv(p, panel.covariates[c], panel.unit_ids, panel.time_ids);
    paths.covariates.push_back(p);
  }
  for (std::size_t i = 0; i < panel.treatments.size(); ++i) {
    auto p = dir / (prefix + "_treatment_" + std::to_string(i) + ".csv");
    write_long_csv(p, panel.treatments[i], panel.unit_ids, panel.time_ids);
    paths.treatments.push_back(p);
  }
  return paths;
}

// --- validation -------------------------------------------------------------

bool ValidationReport::ok() const {
  return std::all_of(checks.begin(), checks.end(), [](const ValidationCheck& c) { return c.passed; });
}

ValidationReport validate_panel(const Panel& panel) {
  ValidationReport report;
  const auto n = panel.units();
  const auto T = panel.periods();
  auto add = [&](std::string name, bool ok, std::string detail = {}) {
    report.checks.push_back({std::move(name), ok, std::move(detail)});
  };

  add("min_dimensions", n >= 2 && T >= 2, "n=" + std::to_string(n) + " T=" + std::to_string(T));
  add("has_covariates", !panel.covariates.empty(), "p=" + std::to_string(panel.covariates.size()));
  add("has_treatments", !panel.treatments.empty(), "q=" + std::to_string(panel.treatments.size()));

  bool shapes = true;
  for (const auto& x : panel.covariates) shapes = shapes && x.rows() == n && x.cols() == T;
  for (const auto& w : panel.treatments) shapes = shapes && w.rows() == n && w.cols() == T;
  add("consistent_shapes", shapes);

  bool finite = panel.outcomes.allFinite();
  for (const auto& x : panel.covariates) finite = finite && x.allFinite();
  add("finite_entries", finite);

  bool binary = true;
  long total_treated = 0;
  for (const auto& w : panel.treatments) {
    const bool b = !((w.array() != 0.0) && (w.array() != 1.0)).any();
    binary = binary && b;
    const long count = static_cast<long>((w.array() == 1.0).count());
    report.treated_counts.push_back(count);
    total_treated += count;
  }
  add("binary_treatments", binary);
  add("any_treated", total_treated > 0, "treated entries=" + std::to_string(total_treated));

  const std::size_t q = panel.treatments.size();
  report.overlap.assign(q, std::vector<long>(q, 0));
  if (shapes) {
    for (std::size_t i = 0; i < q; ++i) {
      for (std::size_t j = 0; j < q; ++j) {
        report.overlap[i][j] =
            static_cast<long>(((panel.treatments[i].array() == 1.0) && (panel.treatments[j].array() == 1.0)).count());
      }
    }
  }
  for (const auto& x : panel.covariates) {
    if (x.size() == 0) {
      report.covariate_ranges.emplace_back(0.0, 0.0);
    } else {
      report.covariate_ranges.emplace_back(x.minCoeff(), x.maxCoeff());
    }
  }
  return report;
}

nlohmann::json panel_metadata_json(const Panel& panel) {
  nlohmann::json j;
  j["n"] = panel.units();
  j["T"] = panel.periods();
  j["p"] = panel.num_covariates();
  j["q"] = panel.num_treatments();
  j["unit_ids"] = panel.unit_ids;
  j["time_ids"] = panel.time_ids;
  return j;
}

}  // namespace pace
