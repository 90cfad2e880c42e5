#include "distlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "distlab/checkpoint.hpp"
#include "distlab/digest.hpp"
#include "distlab/teacher_cache.hpp"

namespace distlab {

namespace {

constexpr const char* kGridFormat = "distlab-grid-v1";
constexpr const char* kRecordFormat = "distlab-record-v1";

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_field(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

/// NaN-aware JSON write: nlohmann renders NaN as null, which reads back fine,
/// but an explicit helper keeps intent visible on both sides.
nlohmann::json num_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

double num_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.at(key).get<double>();
}

/// Total order over doubles that places NaN first, for canonical sorting of
/// rows with partially-applicable hyperparameters.
bool nan_first_less(double a, double b) {
  const bool na = std::isnan(a), nb = std::isnan(b);
  if (na || nb) return na && !nb;
  return a < b;
}

int method_rank(Method m) { return static_cast<int>(m); }

bool cell_less(const ImprovementRow& a, const ImprovementRow& b) {
  if (a.method != b.method) return method_rank(a.method) < method_rank(b.method);
  if (a.eta != b.eta) return nan_first_less(a.eta, b.eta);
  if (a.tau != b.tau) return nan_first_less(a.tau, b.tau);
  if (a.alpha != b.alpha) return nan_first_less(a.alpha, b.alpha);
  if (!(a.gamma == b.gamma) && !(std::isnan(a.gamma) && std::isnan(b.gamma)))
    return nan_first_less(a.gamma, b.gamma);
  if (!(a.p1 == b.p1) && !(std::isnan(a.p1) && std::isnan(b.p1))) return nan_first_less(a.p1, b.p1);
  return a.seed < b.seed;
}

}  // namespace

void GridSpec::validate() const {
  if (methods.empty()) return;  // an empty grid is legal and yields no cells
  if (etas.empty()) throw std::invalid_argument("grid: eta list is empty");
  if (seeds.empty()) throw std::invalid_argument("grid: seed list is empty");
  if (!(ot_units > 0)) throw std::invalid_argument("grid: ot_units must be positive");
  const bool wants_kd = std::any_of(methods.begin(), methods.end(),
                                    [](Method m) { return m != Method::NLL; });
  if (wants_kd && (taus.empty() || alphas.empty()))
    throw std::invalid_argument("grid: tau/alpha lists are empty but a distillation method is listed");
  if (std::count(methods.begin(), methods.end(), Method::HLDC) > 0 && gammas.empty())
    throw std::invalid_argument("grid: gamma list is empty but HLDC is listed");
  if (std::count(methods.begin(), methods.end(), Method::HLDF) > 0 && p1s.empty())
    throw std::invalid_argument("grid: p1 list is empty but HLDF is listed");
}

std::string grid_spec_to_json(const GridSpec& spec) {
  nlohmann::json j;
  j["format"] = kGridFormat;
  j["etas"] = spec.etas;
  j["taus"] = spec.taus;
  j["alphas"] = spec.alphas;
  j["gammas"] = spec.gammas;
  j["p1s"] = spec.p1s;
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : spec.methods) methods.push_back(method_name(m));
  j["methods"] = std::move(methods);
  j["ot_units"] = spec.ot_units;
  j["seeds"] = spec.seeds;
  return j.dump(2) + "\n";
}

GridSpec grid_spec_from_json(const std::string& text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("format", "") != kGridFormat)
      throw std::runtime_error("grid spec: missing or unrecognized format tag");
    GridSpec spec;
    spec.etas = j.value("etas", std::vector<double>{});
    spec.taus = j.value("taus", std::vector<double>{});
    spec.alphas = j.value("alphas", std::vector<double>{});
    spec.gammas = j.value("gammas", std::vector<double>{});
    spec.p1s = j.value("p1s", std::vector<double>{});
    for (const auto& name : j.at("methods"))
      spec.methods.push_back(method_from_name(name.get<std::string>()));
    spec.ot_units = j.value("ot_units", 1.0);
    if (j.contains("seeds")) spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("grid spec: malformed json: ") + e.what());
  }
}

std::vector<GridCell> enumerate_cells(const GridSpec& spec) {
  spec.validate();
  std::vector<GridCell> cells;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Method m : spec.methods) {
    for (std::uint64_t seed : spec.seeds) {
      for (double eta : spec.etas) {
        if (m == Method::NLL) {
          cells.push_back({m, eta, nan, nan, nan, nan, seed});
          continue;
        }
        for (double tau : spec.taus) {
          for (double alpha : spec.alphas) {
            switch (m) {
              case Method::KD:
                cells.push_back({m, eta, tau, alpha, nan, nan, seed});
                break;
              case Method::HLDC:
                for (double gamma : spec.gammas) cells.push_back({m, eta, tau, alpha, gamma, nan, seed});
                break;
              case Method::HLDF:
                for (double p1 : spec.p1s) cells.push_back({m, eta, tau, alpha, nan, p1, seed});
                break;
              default:
                break;
            }
          }
        }
      }
    }
  }
  return cells;
}

std::string cell_run_id(const GridCell& cell, double ot_units) {
  std::ostringstream os;
  os << method_name(cell.method) << ";eta=" << fmt(cell.eta) << ";tau=" << fmt(cell.tau)
     << ";alpha=" << fmt(cell.alpha) << ";gamma=" << fmt(cell.gamma) << ";p1=" << fmt(cell.p1)
     << ";seed=" << cell.seed << ";ot=" << fmt(ot_units);
  return hex(sha256(os.str())).substr(0, 16);
}

std::string record_to_json(const RunRecord& r) {
  nlohmann::json j;
  j["format"] = kRecordFormat;
  j["method"] = method_name(r.method);
  j["eta"] = num_or_null(r.eta);
  j["p1"] = num_or_null(r.p1);
  j["alpha"] = num_or_null(r.alpha);
  j["tau"] = num_or_null(r.tau);
  j["gamma"] = num_or_null(r.gamma);
  j["seed"] = r.seed;
  j["val_logppl"] = num_or_null(r.val_logppl);
  j["mc_error"] = num_or_null(r.mc_error);
  j["cum_flops"] = r.cum_flops;
  j["run_id"] = r.run_id;
  j["checkpoint"] = r.checkpoint;
  return j.dump(2) + "\n";
}

RunRecord record_from_json(const std::string& text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("format", "") != kRecordFormat)
      throw std::runtime_error("record: missing or unrecognized format tag");
    RunRecord r;
    r.method = method_from_name(j.at("method").get<std::string>());
    r.eta = num_from(j, "eta");
    r.p1 = num_from(j, "p1");
    r.alpha = num_from(j, "alpha");
    r.tau = num_from(j, "tau");
    r.gamma = num_from(j, "gamma");
    r.seed = j.value("seed", std::uint64_t{0});
    r.val_logppl = num_from(j, "val_logppl");
    r.mc_error = num_from(j, "mc_error");
    r.cum_flops = j.value("cum_flops", 0.0);
    r.run_id = j.value("run_id", "");
    r.checkpoint = j.value("checkpoint", "");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("record: malformed json: ") + e.what());
  }
}

std::string records_to_csv(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "method,eta,p1,alpha,tau,gamma,val_logppl,mc_error,cum_flops,seed\n";
  for (const RunRecord& r : records) {
    os << method_name(r.method) << ',' << fmt(r.eta) << ',' << fmt(r.p1) << ',' << fmt(r.alpha) << ','
       << fmt(r.tau) << ',' << fmt(r.gamma) << ',' << fmt(r.val_logppl) << ',' << fmt(r.mc_error) << ','
       << fmt(r.cum_flops) << ',' << r.seed << "\n";
  }
  return os.str();
}

std::vector<RunRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("method,", 0) != 0)
    throw std::runtime_error("run table: missing header line");
  std::vector<RunRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (line.back() == ',') f.push_back("");
    if (f.size() != 10)
      throw std::runtime_error("run table: line " + std::to_string(lineno) + " has " +
                               std::to_string(f.size()) + " fields, expected 10");
    RunRecord r;
    r.method = method_from_name(f[0]);
    r.eta = parse_field(f[1]);
    r.p1 = parse_field(f[2]);
    r.alpha = parse_field(f[3]);
    r.tau = parse_field(f[4]);
    r.gamma = parse_field(f[5]);
    r.val_logppl = parse_field(f[6]);
    r.mc_error = parse_field(f[7]);
    r.cum_flops = parse_field(f[8]);
    r.seed = static_cast<std::uint64_t>(std::stoull(f[9]));
    out.push_back(std::move(r));
  }
  return out;
}

double record_metric(const RunRecord& r, const std::string& metric) {
  if (metric == "val_logppl") return r.val_logppl;
  if (metric == "mc_error") return r.mc_error;
  throw std::invalid_argument("unknown metric '" + metric + "' (expected val_logppl or mc_error)");
}

std::vector<RunRecord> run_grid(const GridSpec& spec, const ModelConfig& model_cfg,
                                const TrainConfig& base, const TokenDataset& ds,
                                const std::string& cache_path, const std::string& out_dir,
                                const std::vector<MultipleChoiceItem>* mc_items) {
  namespace fs = std::filesystem;
  const std::vector<GridCell> cells = enumerate_cells(spec);
  fs::create_directories(out_dir);

  std::optional<CacheReader> cache;
  const bool needs_cache = std::any_of(cells.begin(), cells.end(),
                                       [](const GridCell& c) { return c.method != Method::NLL; });
  if (needs_cache) {
    if (cache_path.empty()) throw std::invalid_argument("grid: distillation cells need a teacher cache");
    cache.emplace(cache_path);
  }

  std::vector<RunRecord> records;
  for (const GridCell& cell : cells) {
    const std::string id = cell_run_id(cell, spec.ot_units);
    const fs::path cell_dir = fs::path(out_dir) / id;
    const fs::path record_path = cell_dir / "record.json";

    if (fs::exists(record_path)) {  // completed earlier; reuse, never retrain
      std::ifstream in(record_path);
      std::stringstream buf;
      buf << in.rdbuf();
      records.push_back(record_from_json(buf.str()));
      continue;
    }

    try {
      TrainConfig tc = base;
      tc.lr = cell.eta;
      if (cell.method != Method::NLL) {
        tc.distill.temperature = cell.tau;
        tc.distill.alpha = cell.alpha;
      }
      tc.distill.gamma = cell.method == Method::HLDC ? cell.gamma : 0.0;
      tc.distill.phase1_fraction = cell.method == Method::HLDF ? cell.p1 : 0.0;

      std::int64_t reg_params = 0;
      std::int64_t teacher_width = 0;
      if (cell.method == Method::HLDC || cell.method == Method::HLDF) {
        teacher_width = static_cast<std::int64_t>(cache->header().d_t);
        RegressorConfig rc;
        rc.kind = cell.method == Method::HLDC ? RegressorKind::Linear : RegressorKind::Mlp;
        rc.input_dim = model_cfg.d_emb;
        rc.output_dim = teacher_width;
        reg_params = regressor_param_count(rc);
      }
      const CostModel cm = cost_model_from(model_cfg, reg_params, 0.0, teacher_width);
      const double budget = ot_budget(spec.ot_units, cm);
      const std::int64_t tps = base.batch_size * ds.context_length();
      const FlopsPlan cell_plan =
          plan(cell.method, cm, budget, tps,
               cell.method == Method::HLDF ? cell.p1 : 0.0);

      RunResult<float> res = run<float>(cell.method, model_cfg, tc, cell_plan, ds,
                                        cache ? &*cache : nullptr, cell.seed);

      fs::create_directories(cell_dir);
      {
        std::ofstream metrics(cell_dir / "metrics.csv");
        metrics << metrics_to_csv(res.metrics);
      }
      const std::string ckpt = (cell_dir / "model.ckpt").string();
      save_checkpoint(res.model, ckpt);

      RunRecord r;
      r.method = cell.method;
      r.eta = cell.eta;
      r.p1 = cell.p1;
      r.alpha = cell.alpha;
      r.tau = cell.tau;
      r.gamma = cell.gamma;
      r.seed = cell.seed;
      if (res.final_eval) r.val_logppl = res.final_eval->value;
      if (mc_items && !mc_items->empty()) r.mc_error = mc_error_rate(res.model, *mc_items).value;
      r.cum_flops = res.realized_flops;
      r.run_id = id;
      r.checkpoint = ckpt;
      {
        std::ofstream out(record_path);
        out << record_to_json(r);
      }
      records.push_back(std::move(r));
    } catch (const std::exception& e) {
      std::cerr << "grid: cell " << id << " (" << method_name(cell.method) << ") failed: " << e.what()
                << "\n";
      fs::create_directories(cell_dir);
      std::ofstream err(cell_dir / "error.txt");
      err << e.what() << "\n";
    }
  }
  return records;
}

std::vector<RunRecord> load_records(const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<RunRecord> records;
  if (!fs::is_directory(out_dir)) throw std::runtime_error("records: " + out_dir + " is not a directory");
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const fs::path p = entry.path() / "record.json";
    if (entry.is_directory() && fs::exists(p)) paths.push_back(p);
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    std::ifstream in(p);
    std::stringstream buf;
    buf << in.rdbuf();
    records.push_back(record_from_json(buf.str()));
  }
  return records;
}

std::vector<ImprovementRow> pointwise_improvement(const std::vector<RunRecord>& records,
                                                  const std::string& metric) {
  // Baseline lookup by the shared hyperparameter key.
  auto key_of = [](const RunRecord& r) {
    std::ostringstream os;
    os << fmt(r.eta) << '|' << fmt(r.tau) << '|' << fmt(r.alpha) << '|' << r.seed;
    return os.str();
  };
  std::unordered_map<std::string, const RunRecord*> baselines;
  for (const RunRecord& r : records)
    if (r.method == Method::KD) baselines[key_of(r)] = &r;

  std::vector<ImprovementRow> rows;
  for (const RunRecord& r : records) {
    if (r.method != Method::HLDC && r.method != Method::HLDF) continue;
    auto it = baselines.find(key_of(r));
    if (it == baselines.end()) {
      std::cerr << "report: no KD baseline at eta=" << fmt(r.eta) << " tau=" << fmt(r.tau)
                << " alpha=" << fmt(r.alpha) << " seed=" << r.seed << "; skipping "
                << method_name(r.method) << " point\n";
      continue;
    }
    ImprovementRow row;
    row.method = r.method;
    row.eta = r.eta;
    row.tau = r.tau;
    row.alpha = r.alpha;
    row.gamma = r.gamma;
    row.p1 = r.p1;
    row.seed = r.seed;
    row.baseline = record_metric(*it->second, metric);
    row.value = record_metric(r, metric);
    row.delta = row.baseline - row.value;
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), cell_less);
  return rows;
}

std::string improvement_to_csv(const std::vector<ImprovementRow>& rows) {
  std::ostringstream os;
  os << "method,eta,tau,alpha,gamma,p1,seed,baseline,value,delta\n";
  for (const ImprovementRow& r : rows) {
    os << method_name(r.method) << ',' << fmt(r.eta) << ',' << fmt(r.tau) << ',' << fmt(r.alpha) << ','
       << fmt(r.gamma) << ',' << fmt(r.p1) << ',' << r.seed << ',' << fmt(r.baseline) << ','
       << fmt(r.value) << ',' << fmt(r.delta) << "\n";
  }
  return os.str();
}

std::vector<BestRow> best_table(const std::vector<RunRecord>& records,
                                const std::vector<std::string>& metrics) {
  std::vector<BestRow> rows;
  for (const std::string& metric : metrics) {
    for (Method m : {Method::NLL, Method::KD, Method::HLDC, Method::HLDF}) {
      const RunRecord* best = nullptr;
      double best_v = 0;
      for (const RunRecord& r : records) {
        if (r.method != m) continue;
        const double v = record_metric(r, metric);
        if (std::isnan(v)) continue;
        if (!best || v < best_v) {
          best = &r;
          best_v = v;
        }
      }
      if (!best) continue;
      rows.push_back({metric, m, best_v, best->eta, best->tau, best->alpha, best->gamma, best->p1});
    }
  }
  return rows;
}

std::string best_to_csv(const std::vector<BestRow>& rows) {
  std::ostringstream os;
  os << "metric,method,value,eta,tau,alpha,gamma,p1\n";
  for (const BestRow& r : rows) {
    os << r.metric << ',' << method_name(r.method) << ',' << fmt(r.value) << ',' << fmt(r.eta) << ','
       << fmt(r.tau) << ',' << fmt(r.alpha) << ',' << fmt(r.gamma) << ',' << fmt(r.p1) << "\n";
  }
  return os.str();
}

}  // namespace distlab
