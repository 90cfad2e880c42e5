#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "distlab/report.hpp"
#include "distlab/teacher_cache.hpp"

using namespace distlab;
using Split = TokenDataset::Split;
namespace fs = std::filesystem;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

/// Random-token documents over tokens [0, vocab-2], each exactly one chunk.
TokenDataset random_dataset(std::int64_t vocab, std::int64_t context, int ndocs, std::uint64_t seed,
                            double val_fraction = 0.0) {
  Rng rng(seed);
  std::vector<std::vector<std::int32_t>> docs;
  for (int d = 0; d < ndocs; ++d) {
    std::vector<std::int32_t> doc(static_cast<std::size_t>(context));
    for (auto& t : doc) t = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab - 1)));
    docs.push_back(std::move(doc));
  }
  return TokenDataset::pack(docs, vocab, context, val_fraction, 23);
}

ModelConfig tiny_config(std::int64_t vocab, std::int64_t context) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.d_emb = 16;
  cfg.num_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab;
  cfg.context_length = context;
  return cfg;
}

GridSpec example_grid() {
  GridSpec spec;
  spec.etas = {1e-4, 3e-4, 1e-3};
  spec.taus = {1.0, 2.0};
  spec.alphas = {0.5, 1.0};
  spec.gammas = {0.25, 1.0};
  spec.p1s = {0.1, 0.3};
  spec.methods = {Method::NLL, Method::KD, Method::HLDC, Method::HLDF};
  return spec;
}

RunRecord rec(Method m, double eta, double tau, double alpha, double gamma, double p1,
              std::uint64_t seed, double val, double mc = kNan) {
  RunRecord r;
  r.method = m;
  r.eta = eta;
  r.tau = tau;
  r.alpha = alpha;
  r.gamma = gamma;
  r.p1 = p1;
  r.seed = seed;
  r.val_logppl = val;
  r.mc_error = mc;
  r.cum_flops = 1e9;
  r.run_id = cell_run_id({m, eta, tau, alpha, gamma, p1, seed}, 1.0);
  return r;
}

bool same_or_both_nan(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

}  // namespace

TEST_CASE("cell enumeration matches the hand-counted grid sizes") {
  const GridSpec spec = example_grid();
  const std::vector<GridCell> cells = enumerate_cells(spec);

  // 3 etas; KD multiplies in 2 taus x 2 alphas; HLDC adds 2 gammas; HLDF 2 p1s.
  auto count = [&](Method m) {
    return std::count_if(cells.begin(), cells.end(),
                         [&](const GridCell& c) { return c.method == m; });
  };
  CHECK(count(Method::NLL) == 3);
  CHECK(count(Method::KD) == 12);
  CHECK(count(Method::HLDC) == 24);
  CHECK(count(Method::HLDF) == 24);
  CHECK(cells.size() == 63);

  for (const GridCell& c : cells) {
    CHECK(!std::isnan(c.eta));
    if (c.method == Method::NLL) {
      CHECK(std::isnan(c.tau));
      CHECK(std::isnan(c.alpha));
    } else {
      CHECK(!std::isnan(c.tau));
      CHECK(!std::isnan(c.alpha));
    }
    CHECK(std::isnan(c.gamma) == (c.method != Method::HLDC));
    CHECK(std::isnan(c.p1) == (c.method != Method::HLDF));
  }
}

TEST_CASE("cell enumeration scales with seeds and tolerates an empty grid") {
  GridSpec spec = example_grid();
  spec.seeds = {0, 1, 2};
  CHECK(enumerate_cells(spec).size() == 3 * 63);

  GridSpec empty;
  empty.methods = {};
  CHECK(enumerate_cells(empty).empty());
}

TEST_CASE("grid validation rejects lists the listed methods would need") {
  GridSpec spec;
  spec.methods = {Method::NLL};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);  // no etas
  spec.etas = {1e-3};
  CHECK_NOTHROW(spec.validate());

  spec.methods = {Method::KD};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);  // no taus/alphas
  spec.taus = {1.0};
  spec.alphas = {0.5};
  CHECK_NOTHROW(spec.validate());

  spec.methods = {Method::HLDC};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);  // no gammas
  spec.gammas = {0.5};
  CHECK_NOTHROW(spec.validate());

  spec.methods = {Method::HLDF};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);  // no p1s
  spec.p1s = {0.2};
  CHECK_NOTHROW(spec.validate());

  spec.ot_units = 0.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.ot_units = 1.0;
  spec.seeds = {};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("run ids are unique across cells and sensitive to every input") {
  const GridSpec spec = example_grid();
  const std::vector<GridCell> cells = enumerate_cells(spec);
  std::vector<std::string> ids;
  for (const GridCell& c : cells) ids.push_back(cell_run_id(c, spec.ot_units));
  std::sort(ids.begin(), ids.end());
  CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());

  const GridCell c = cells.front();
  CHECK(cell_run_id(c, 1.0) == cell_run_id(c, 1.0));  // deterministic
  CHECK(cell_run_id(c, 1.0) != cell_run_id(c, 2.0));  // budget matters
  GridCell seeded = c;
  seeded.seed = 7;
  CHECK(cell_run_id(seeded, 1.0) != cell_run_id(c, 1.0));
}

TEST_CASE("grid spec json survives a round trip and rejects junk") {
  GridSpec spec = example_grid();
  spec.ot_units = 0.25;
  spec.seeds = {3, 9};
  const GridSpec back = grid_spec_from_json(grid_spec_to_json(spec));
  CHECK(back.etas == spec.etas);
  CHECK(back.taus == spec.taus);
  CHECK(back.alphas == spec.alphas);
  CHECK(back.gammas == spec.gammas);
  CHECK(back.p1s == spec.p1s);
  CHECK(back.methods == spec.methods);
  CHECK(back.ot_units == spec.ot_units);
  CHECK(back.seeds == spec.seeds);

  CHECK_THROWS_WITH_AS(grid_spec_from_json("{"), doctest::Contains("malformed"), std::runtime_error);
  CHECK_THROWS_WITH_AS(grid_spec_from_json(R"({"format":"nope","methods":[]})"),
                       doctest::Contains("format"), std::runtime_error);
}

TEST_CASE("run records survive json and csv round trips with absent fields intact") {
  RunRecord r = rec(Method::HLDF, 3e-4, 2.0, 0.5, kNan, 0.1 + 0.2, 11, 2.987654321098765, 0.43);
  r.cum_flops = 1.2345678901234567e12;
  r.checkpoint = "runs/abc/model.ckpt";

  const RunRecord jr = record_from_json(record_to_json(r));
  CHECK(jr.method == r.method);
  CHECK(jr.eta == r.eta);
  CHECK(same_or_both_nan(jr.gamma, r.gamma));
  CHECK(jr.p1 == r.p1);  // 0.1 + 0.2 survives exactly
  CHECK(jr.seed == r.seed);
  CHECK(jr.val_logppl == r.val_logppl);
  CHECK(jr.mc_error == r.mc_error);
  CHECK(jr.cum_flops == r.cum_flops);
  CHECK(jr.run_id == r.run_id);
  CHECK(jr.checkpoint == r.checkpoint);

  RunRecord nll = rec(Method::NLL, 1e-3, kNan, kNan, kNan, kNan, 0, 3.1);
  const std::string csv = records_to_csv({r, nll});
  CHECK(csv.rfind("method,eta,p1,alpha,tau,gamma,val_logppl,mc_error,cum_flops,seed\n", 0) == 0);
  const std::vector<RunRecord> back = records_from_csv(csv);
  REQUIRE(back.size() == 2);
  CHECK(records_to_csv(back) == csv);  // lossless through text
  CHECK(back[0].p1 == r.p1);
  CHECK(std::isnan(back[1].tau));
  CHECK(std::isnan(back[1].mc_error));

  CHECK_THROWS_WITH_AS(records_from_csv("eta,method\n"), doctest::Contains("header"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(records_from_csv("method,eta,p1,alpha,tau,gamma,val_logppl,mc_error,cum_flops,seed\nKD,1,2\n"),
                       doctest::Contains("fields"), std::runtime_error);
  CHECK_THROWS_WITH_AS(record_from_json(R"({"format":"distlab-record-v1"})"),
                       doctest::Contains("method"), std::runtime_error);
}

TEST_CASE("record_metric selects the named column and rejects others") {
  const RunRecord r = rec(Method::KD, 1e-3, 1.0, 0.5, kNan, kNan, 0, 2.5, 0.4);
  CHECK(record_metric(r, "val_logppl") == 2.5);
  CHECK(record_metric(r, "mc_error") == 0.4);
  CHECK_THROWS_AS(record_metric(r, "bleu"), std::invalid_argument);
}

TEST_CASE("pointwise improvement subtracts the matched-baseline value") {
  // One shared (eta, tau, alpha, seed) key; HLDF beats KD by 0.005, HLDC loses.
  std::vector<RunRecord> records = {
      rec(Method::KD, 3e-4, 1.0, 0.5, kNan, kNan, 0, 3.005),
      rec(Method::HLDF, 3e-4, 1.0, 0.5, kNan, 0.1, 0, 3.000),
      rec(Method::HLDC, 3e-4, 1.0, 0.5, 0.25, kNan, 0, 3.020),
      rec(Method::NLL, 3e-4, kNan, kNan, kNan, kNan, 0, 3.3),  // never a Δ row
  };
  const std::vector<ImprovementRow> rows = pointwise_improvement(records, "val_logppl");
  REQUIRE(rows.size() == 2);

  // Canonical order puts HLDC before HLDF.
  CHECK(rows[0].method == Method::HLDC);
  CHECK(rows[0].baseline == 3.005);
  CHECK(rows[0].value == 3.020);
  CHECK(rows[0].delta == doctest::Approx(-0.015).epsilon(1e-12));

  CHECK(rows[1].method == Method::HLDF);
  CHECK(rows[1].delta == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(rows[1].p1 == 0.1);

  // Identical values give exactly zero.
  std::vector<RunRecord> tied = {
      rec(Method::KD, 3e-4, 1.0, 0.5, kNan, kNan, 0, 2.75),
      rec(Method::HLDF, 3e-4, 1.0, 0.5, kNan, 0.3, 0, 2.75),
  };
  CHECK(pointwise_improvement(tied, "val_logppl")[0].delta == 0.0);
}

TEST_CASE("improvement skips points with no matching baseline and ignores record order") {
  std::vector<RunRecord> records = {
      rec(Method::KD, 1e-4, 1.0, 0.5, kNan, kNan, 0, 3.1),
      rec(Method::HLDF, 1e-4, 1.0, 0.5, kNan, 0.1, 0, 3.0),
      rec(Method::HLDF, 1e-4, 2.0, 0.5, kNan, 0.1, 0, 2.9),  // no KD at tau=2
      rec(Method::HLDC, 1e-4, 1.0, 0.5, 0.25, kNan, 0, 3.05),
      rec(Method::HLDC, 1e-4, 1.0, 0.5, 1.0, kNan, 0, 3.07),
      rec(Method::HLDF, 1e-4, 1.0, 0.5, kNan, 0.3, 0, 3.02),
  };
  const std::vector<ImprovementRow> rows = pointwise_improvement(records, "val_logppl");
  REQUIRE(rows.size() == 4);  // the tau=2 HLDF point dropped

  std::vector<RunRecord> shuffled = records;
  std::mt19937 gen(99);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    const std::vector<ImprovementRow> again = pointwise_improvement(shuffled, "val_logppl");
    CHECK(improvement_to_csv(again) == improvement_to_csv(rows));
  }

  const std::string csv = improvement_to_csv(rows);
  CHECK(csv.rfind("method,eta,tau,alpha,gamma,p1,seed,baseline,value,delta\n", 0) == 0);
}

TEST_CASE("best table is the per-method argmin and skips methods with no data") {
  std::vector<RunRecord> records;
  std::mt19937 gen(7);
  std::uniform_real_distribution<double> val(2.0, 4.0);
  const std::vector<double> etas = {1e-4, 3e-4, 1e-3};
  for (double eta : etas) {
    records.push_back(rec(Method::NLL, eta, kNan, kNan, kNan, kNan, 0, val(gen)));
    for (double tau : {1.0, 2.0}) {
      records.push_back(rec(Method::KD, eta, tau, 0.5, kNan, kNan, 0, val(gen), val(gen) / 8));
      records.push_back(rec(Method::HLDF, eta, tau, 0.5, kNan, 0.2, 0, val(gen), val(gen) / 8));
    }
  }

  // NLL rows carry no mc_error, so that metric covers only KD and HLDF.
  const std::vector<BestRow> rows = best_table(records, {"val_logppl", "mc_error"});
  REQUIRE(rows.size() == 5);

  for (const BestRow& row : rows) {
    double brute = std::numeric_limits<double>::infinity();
    for (const RunRecord& r : records) {
      if (r.method != row.method) continue;
      const double v = record_metric(r, row.metric);
      if (!std::isnan(v)) brute = std::min(brute, v);
    }
    CHECK(row.value == brute);
  }

  // A single record is reported verbatim, hyperparameters included.
  const RunRecord only = rec(Method::HLDC, 3e-4, 2.0, 0.25, 1.0, kNan, 5, 2.22);
  const std::vector<BestRow> one = best_table({only}, {"val_logppl"});
  REQUIRE(one.size() == 1);
  CHECK(one[0].method == Method::HLDC);
  CHECK(one[0].value == 2.22);
  CHECK(one[0].eta == 3e-4);
  CHECK(one[0].tau == 2.0);
  CHECK(one[0].alpha == 0.25);
  CHECK(one[0].gamma == 1.0);
  CHECK(std::isnan(one[0].p1));

  const std::string csv = best_to_csv(one);
  CHECK(csv.rfind("metric,method,value,eta,tau,alpha,gamma,p1\n", 0) == 0);
  CHECK(csv.find("val_logppl,HLDC,2.2200000000000002,0.00029999999999999997,2,0.25,1,\n") !=
        std::string::npos);
}

TEST_CASE("a small grid trains every method compute-matched, then resumes for free") {
  const std::int64_t V = 16, context = 16;
  const ModelConfig mc = tiny_config(V, context);
  const TokenDataset ds = random_dataset(V, context, 32, 4242, /*val_fraction=*/0.25);

  // Teacher: same shape, independent seed; cache layer-1 activations + full logits.
  Transformer<float> teacher(mc, 9001);
  const std::string cache_path = "/tmp/distlab_report_grid.tdc";
  cache_teacher(teacher, ds, Split::Train, /*layer=*/1, /*k=*/V, cache_path);

  GridSpec spec;
  spec.etas = {3e-3};
  spec.taus = {1.0};
  spec.alphas = {0.5};
  spec.gammas = {0.5};
  spec.p1s = {0.25};
  spec.methods = {Method::NLL, Method::KD, Method::HLDC, Method::HLDF};

  TrainConfig base;
  base.batch_size = 4;
  base.distill.top_k = V;
  base.eval_every = 0;  // final eval only

  // Size the budget so every cell takes a few hundred cheap steps: OT_k covers
  // 20*N*k tokens, and each step consumes batch*context of them.
  const CostModel cm0 = cost_model_from(mc);
  const double tps = static_cast<double>(base.batch_size * context);
  spec.ot_units = 320.0 * tps / (20.0 * cm0.backbone_params);

  const std::string out_dir = "/tmp/distlab_report_grid_runs";
  fs::remove_all(out_dir);
  const std::vector<RunRecord> records = run_grid(spec, mc, base, ds, cache_path, out_dir);
  REQUIRE(records.size() == 4);

  // Every cell actually trained and landed within 1% of the shared budget.
  const double budget = ot_budget(spec.ot_units, cm0);
  for (const RunRecord& r : records) {
    CHECK(!std::isnan(r.val_logppl));
    CHECK(std::isnan(r.mc_error));  // no mc items supplied
    CHECK(r.cum_flops > 0);
    CHECK(std::abs(r.cum_flops - budget) / budget < 0.01);
    CHECK(fs::exists(r.checkpoint));
    CHECK(fs::exists(fs::path(out_dir) / r.run_id / "metrics.csv"));
  }
  for (std::size_t i = 1; i < records.size(); ++i)
    CHECK(std::abs(records[i].cum_flops - records[0].cum_flops) / records[0].cum_flops < 0.01);

  // Reloading from disk reproduces the in-memory records (run-id order).
  auto by_id = [](std::vector<RunRecord> rs) {
    std::sort(rs.begin(), rs.end(),
              [](const RunRecord& a, const RunRecord& b) { return a.run_id < b.run_id; });
    return records_to_csv(rs);
  };
  CHECK(by_id(load_records(out_dir)) == by_id(records));

  // A second pass must reuse the records, not retrain: record files untouched.
  std::vector<fs::file_time_type> stamps;
  for (const RunRecord& r : records)
    stamps.push_back(fs::last_write_time(fs::path(out_dir) / r.run_id / "record.json"));
  const std::vector<RunRecord> again = run_grid(spec, mc, base, ds, cache_path, out_dir);
  CHECK(records_to_csv(again) == records_to_csv(records));
  for (std::size_t i = 0; i < records.size(); ++i)
    CHECK(fs::last_write_time(fs::path(out_dir) / records[i].run_id / "record.json") == stamps[i]);

  // The improvement pipeline runs end to end on real records.
  const std::vector<ImprovementRow> rows = pointwise_improvement(records, "val_logppl");
  REQUIRE(rows.size() == 2);  // HLDC and HLDF, one cell each
  for (const ImprovementRow& row : rows) CHECK(std::isfinite(row.delta));
  CHECK(best_table(records, {"val_logppl"}).size() == 4);
}

TEST_CASE("a failing cell is skipped and recorded while the grid continues") {
  const std::int64_t V = 16, context = 16;
  const ModelConfig mc = tiny_config(V, context);
  const TokenDataset ds = random_dataset(V, context, 16, 77, 0.25);

  GridSpec spec;
  spec.etas = {0.0, 1e-3};  // eta = 0 is rejected by training-config validation
  spec.methods = {Method::NLL};
  const CostModel cm0 = cost_model_from(mc);
  spec.ot_units = 20.0 * 16.0 * 4.0 / (20.0 * cm0.backbone_params);

  TrainConfig base;
  base.batch_size = 4;

  const std::string out_dir = "/tmp/distlab_report_grid_fail";
  fs::remove_all(out_dir);
  const std::vector<RunRecord> records = run_grid(spec, mc, base, ds, "", out_dir);
  REQUIRE(records.size() == 1);
  CHECK(records[0].eta == 1e-3);

  const std::string bad_id = cell_run_id({Method::NLL, 0.0, kNan, kNan, kNan, kNan, 0}, spec.ot_units);
  CHECK(fs::exists(fs::path(out_dir) / bad_id / "error.txt"));
  CHECK(!fs::exists(fs::path(out_dir) / bad_id / "record.json"));
}
