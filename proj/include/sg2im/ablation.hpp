#pragma once

#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/pipeline.hpp"

namespace sg2im {

struct AblationCell {
  std::string name;
  bool use_gca = true, use_align = true, use_mmd = true;
  std::optional<double> lambda, beta;
};

// Rows in the order of the paper's ablation table.
inline std::vector<AblationCell> default_grid() {
  return {
      {"W/O GCA", false, true, true, std::nullopt, std::nullopt},
      {"W/O L_align", true, false, true, std::nullopt, std::nullopt},
      {"W/O L_MMD", true, true, false, std::nullopt, std::nullopt},
      {"Ours (lambda=0.8, beta=0.7)", true, true, true, 0.8, 0.7},
      {"Ours (lambda=0.6, beta=0.3)", true, true, true, 0.6, 0.3},
      {"Ours", true, true, true, std::nullopt, std::nullopt},
  };
}

inline RunConfig cell_config(RunConfig base, const AblationCell& cell) {
  base.ablation = {cell.use_gca, cell.use_align, cell.use_mmd};
  if (cell.lambda) base.loss.lambda = *cell.lambda;
  if (cell.beta) base.loss.beta = *cell.beta;
  base = resolve_toggles(base);
  validate(base);
  return base;
}

struct AblationRow {
  std::string name;
  nlohmann::json config;
  std::optional<metrics::MetricsReport> report;  // empty when the cell failed
  std::string error;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row{{"model", r.name}, {"config", r.config}, {"status", r.report ? "ok" : "failed"}};
      if (r.report) {
        row["is"] = r.report->is_mean;
        row["fid"] = r.report->fid;
        row["ds"] = r.report->ds_mean;
        row["oor"] = r.report->oor_mean;
      } else {
        row["error"] = r.error;
      }
      j.push_back(row);
    }
    return {{"rows", j}};
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(30) << "Model type" << std::right << std::setw(10) << "IS" << std::setw(10) << "FID"
       << std::setw(10) << "DS" << std::setw(10) << "OOR" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
      os << std::left << std::setw(30) << r.name << std::right;
      if (r.report)
        os << std::setw(10) << r.report->is_mean << std::setw(10) << r.report->fid << std::setw(10)
           << r.report->ds_mean << std::setw(10) << r.report->oor_mean << '\n';
      else
        os << "  failed: " << r.error << '\n';
    }
    return os.str();
  }
};

// Runs every cell with the base config's seeds. The GCA stage does not
// depend on the loss weights, so it runs once and is shared by the cells
// that use it. A failing cell is recorded and the grid continues.
inline AblationReport run_ablation(const RunConfig& base, const Dataset& data,
                                   const std::vector<AblationCell>& grid = default_grid(),
                                   const std::function<void(const AblationRow&)>& on_row = {}) {
  AblationReport rep;
  std::optional<GcaStage> shared;
  std::string gca_error;
  for (const auto& cell : grid) {
    AblationRow row{cell.name, nullptr, std::nullopt, {}};
    try {
      const RunConfig c = cell_config(base, cell);
      row.config = to_json(c);
      if (c.ablation.use_gca && !shared && gca_error.empty()) {
        try {
          Session s(c, data);
          shared.emplace(run_gca_stage(s));
        } catch (const std::exception& e) {
          gca_error = e.what();
        }
      }
      if (c.ablation.use_gca && !shared) throw std::runtime_error("GCA stage failed: " + gca_error);
      row.report = run_pipeline(c, data, c.ablation.use_gca ? &shared->encoder : nullptr).report;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (on_row) on_row(row);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace sg2im
