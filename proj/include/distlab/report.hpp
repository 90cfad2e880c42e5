#pragma once

// Hyperparameter-grid execution and the comparison artifacts built from its
// records: the full run table, pointwise improvement-over-baseline rows
// (histogram/scatter source data), and per-method best tables. Everything is
// emitted as CSV; plotting stays outside the repo.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "distlab/data.hpp"
#include "distlab/eval.hpp"
#include "distlab/flops.hpp"
#include "distlab/model.hpp"
#include "distlab/trainer.hpp"

namespace distlab {

/// The swept hyperparameter space. Methods pair with the lists they actually
/// read: NLL varies only with eta; KD adds (tau, alpha); HLDC further adds
/// gamma; HLDF further adds p1. The budget is shared by every cell.
struct GridSpec {
  std::vector<double> etas;
  std::vector<double> taus;
  std::vector<double> alphas;
  std::vector<double> gammas;
  std::vector<double> p1s;
  std::vector<Method> methods;
  double ot_units = 1.0;
  std::vector<std::uint64_t> seeds = {0};

  void validate() const;
};

std::string grid_spec_to_json(const GridSpec& spec);
GridSpec grid_spec_from_json(const std::string& text);

/// One point of the grid. Hyperparameters a method does not read are NaN.
struct GridCell {
  Method method = Method::NLL;
  double eta = std::numeric_limits<double>::quiet_NaN();
  double tau = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
  double p1 = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
};

/// Expands a spec into cells under the pairing rules, in a deterministic
/// order. Collision-free ids come from cell_run_id below.
std::vector<GridCell> enumerate_cells(const GridSpec& spec);

/// Stable content id of a cell (hyperparameters, seed, budget): the cell's
/// directory name under the grid output root.
std::string cell_run_id(const GridCell& cell, double ot_units);

/// One finished run. Metric fields stay NaN until their eval exists;
/// hyperparameters a method does not read stay NaN as well.
struct RunRecord {
  Method method = Method::NLL;
  double eta = std::numeric_limits<double>::quiet_NaN();
  double p1 = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
  double tau = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  double val_logppl = std::numeric_limits<double>::quiet_NaN();
  double mc_error = std::numeric_limits<double>::quiet_NaN();
  double cum_flops = 0;
  std::string run_id;
  std::string checkpoint;
};

std::string record_to_json(const RunRecord& r);
RunRecord record_from_json(const std::string& text);

/// Full run table. Columns, in order:
///   method,eta,p1,alpha,tau,gamma,val_logppl,mc_error,cum_flops,seed
/// NaN serializes as an empty field; the round trip is lossless.
std::string records_to_csv(const std::vector<RunRecord>& records);
std::vector<RunRecord> records_from_csv(const std::string& text);

/// Trains every cell of the grid that has no record yet. Each cell gets
/// out_dir/<run_id>/ holding record.json, metrics.csv and model.ckpt;
/// existing records are loaded instead of retrained, so a rerun of a
/// completed grid trains nothing. A failing cell is reported on stderr and
/// skipped; the grid continues. Returns records in cell order.
std::vector<RunRecord> run_grid(const GridSpec& spec, const ModelConfig& model_cfg,
                                const TrainConfig& base, const TokenDataset& ds,
                                const std::string& cache_path, const std::string& out_dir,
                                const std::vector<MultipleChoiceItem>* mc_items = nullptr);

/// Collects every record.json under a grid output root, in run-id order.
std::vector<RunRecord> load_records(const std::string& out_dir);

/// One pointwise comparison against the baseline at a shared (eta, tau,
/// alpha, seed) point. delta = baseline - value, so positive means the
/// method beats the baseline on a lower-is-better metric.
struct ImprovementRow {
  Method method = Method::NLL;
  double eta = 0;
  double tau = 0;
  double alpha = 0;
  double gamma = 0;
  double p1 = 0;
  std::uint64_t seed = 0;
  double baseline = 0;
  double value = 0;
  double delta = 0;
};

/// Pairs every HLDC/HLDF record with the KD record sharing its (eta, tau,
/// alpha, seed) and reports the metric delta. Points with no baseline are
/// skipped with a warning. The output order is canonical, so permuting the
/// input records changes nothing.
std::vector<ImprovementRow> pointwise_improvement(const std::vector<RunRecord>& records,
                                                  const std::string& metric);

std::string improvement_to_csv(const std::vector<ImprovementRow>& rows);

/// Best (minimum) metric value per method, with the winning cell's
/// hyperparameters. Rows come out in method order (NLL, KD, HLDC, HLDF).
struct BestRow {
  std::string metric;
  Method method = Method::NLL;
  double value = 0;
  double eta = 0;
  double tau = 0;
  double alpha = 0;
  double gamma = 0;
  double p1 = 0;
};

std::vector<BestRow> best_table(const std::vector<RunRecord>& records,
                                const std::vector<std::string>& metrics);

std::string best_to_csv(const std::vector<BestRow>& rows);

/// Metric accessor by report name: "val_logppl" or "mc_error".
double record_metric(const RunRecord& r, const std::string& metric);

}  // namespace distlab
