#include <fstream>
#include <sstream>

#include "internal.hpp"
#include "trelm/errors.hpp"

namespace trelm {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("non-numeric value '" + s + "' in " + what);
  }
}

struct RunData {
  std::string name;
  RunConfig config;
  CsvTable metrics;
  std::map<std::string, std::string> timing;  // step -> ms
  CsvTable history;
  bool has_history = false;
};

RunData load_run_logs(const std::filesystem::path& dir) {
  RunData r;
  r.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  r.config = read_run_config(dir / "config.json");
  r.metrics = read_csv(dir / "metrics.csv");
  if (std::filesystem::exists(dir / "timing.csv")) {
    const CsvTable t = read_csv(dir / "timing.csv");
    const std::size_t s = t.column("step"), ms = t.column("wallclock_ms");
    for (const auto& row : t.rows) r.timing[row.at(s)] = row.at(ms);
  }
  if (std::filesystem::exists(dir / "probe_history.csv")) {
    r.history = read_csv(dir / "probe_history.csv");
    r.has_history = true;
  }
  return r;
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ValidationError("missing column '" + name + "'");
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + " is empty");
  t.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split_line(line);
    if (row.size() != t.header.size()) {
      throw ValidationError(path.string() + ": row width differs from the header");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

CompareReport compare_runs(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ValidationError("compare needs at least two runs");
  std::vector<RunData> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run_logs(d));
  for (const auto& r : runs) {
    if (r.metrics.header != runs[0].metrics.header) throw ValidationError("disjoint metric schemas");
  }

  CompareReport report;
  for (const auto& r : runs) report.runs.push_back(r.name);
  const bool all_timed = std::all_of(runs.begin(), runs.end(), [](const RunData& r) { return !r.timing.empty(); });

  report.columns.push_back("step");
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const std::string p = "run" + std::to_string(k) + "_";
    report.columns.push_back(p + "l_total");
    report.columns.push_back(p + "coverage_fraction");
    if (k > 0) report.columns.push_back(p + "delta_l_total");
    if (all_timed) report.columns.push_back(p + "wallclock_ms");
  }

  // Rows cover the steps every run reached.
  std::size_t n_steps = runs[0].metrics.rows.size();
  for (const auto& r : runs) n_steps = std::min(n_steps, r.metrics.rows.size());
  const std::size_t c_step = runs[0].metrics.column("step");
  const std::size_t c_loss = runs[0].metrics.column("l_total");
  const std::size_t c_cov = runs[0].metrics.column("coverage_fraction");
  std::vector<double> loss_sum(runs.size(), 0.0), cov_sum(runs.size(), 0.0), ms_sum(runs.size(), 0.0);
  for (std::size_t s = 0; s < n_steps; ++s) {
    std::vector<std::string> row{runs[0].metrics.rows[s][c_step]};
    const double base = to_double(runs[0].metrics.rows[s][c_loss], "l_total");
    for (std::size_t k = 0; k < runs.size(); ++k) {
      const auto& m = runs[k].metrics.rows[s];
      if (m[c_step] != row[0]) throw ValidationError("runs are not aligned at row " + std::to_string(s));
      const double loss = to_double(m[c_loss], "l_total");
      const double cov = to_double(m[c_cov], "coverage_fraction");
      loss_sum[k] += loss;
      cov_sum[k] += cov;
      row.push_back(m[c_loss]);
      row.push_back(m[c_cov]);
      if (k > 0) row.push_back(detail::format_double(loss - base));
      if (all_timed) {
        const auto it = runs[k].timing.find(m[c_step]);
        const std::string ms = it == runs[k].timing.end() ? "" : it->second;
        if (!ms.empty()) ms_sum[k] += to_double(ms, "wallclock_ms");
        row.push_back(ms);
      }
    }
    report.rows.push_back(std::move(row));
  }

  nlohmann::json summary = nlohmann::json::object();
  summary["steps_compared"] = n_steps;
  nlohmann::json list = nlohmann::json::array();
  double base_p1 = 0.0;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& r = runs[k];
    nlohmann::json j = {{"run", r.name},
                        {"mode", r.config.mode},
                        {"seed", r.config.seed ? nlohmann::json(*r.config.seed) : nlohmann::json(nullptr)},
                        {"mean_l_total", n_steps ? loss_sum[k] / static_cast<double>(n_steps) : 0.0},
                        {"mean_coverage_fraction", n_steps ? cov_sum[k] / static_cast<double>(n_steps) : 0.0}};
    if (all_timed) j["wallclock_ms"] = ms_sum[k];
    if (r.has_history && !r.history.rows.empty()) {
      const std::size_t c = r.history.column("heldout_p_at_1");
      nlohmann::json per_epoch = nlohmann::json::array();
      for (const auto& row : r.history.rows) per_epoch.push_back(to_double(row[c], "heldout_p_at_1"));
      const double final_p1 = per_epoch.back().get<double>();
      j["heldout_p_at_1"] = per_epoch;
      j["final_heldout_p_at_1"] = final_p1;
      if (k == 0) base_p1 = final_p1;
      if (k > 0 && runs[0].has_history && !runs[0].history.rows.empty()) {
        j["delta_final_heldout_p_at_1"] = final_p1 - base_p1;
      }
    }
    list.push_back(std::move(j));
  }
  summary["runs"] = std::move(list);
  report.summary = std::move(summary);
  return report;
}

void write_compare_report(const CompareReport& report, const std::filesystem::path& csv_path,
                          const std::filesystem::path& json_path) {
  std::ostringstream csv;
  for (std::size_t c = 0; c < report.columns.size(); ++c) csv << (c ? "," : "") << report.columns[c];
  csv << '\n';
  for (const auto& row : report.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) csv << (c ? "," : "") << row[c];
    csv << '\n';
  }
  detail::write_text_file(csv_path, csv.str());
  nlohmann::json j = report.summary;
  j["columns"] = report.columns;
  detail::write_text_file(json_path, j.dump(2) + "\n");
}

}  // namespace trelm
