// Command-line front end: dataset ingestion, teacher caching, FLOPs planning,
// budgeted training runs, evaluation, grid execution, and report generation.
// Every subcommand reads/writes the documented on-disk formats and prints its
// primary artifact to stdout; diagnostics go to stderr.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "distlab/checkpoint.hpp"
#include "distlab/report.hpp"
#include "distlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace distlab;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

Tokenizer tokenizer_from_arg(const std::string& arg) {
  if (arg == "byte") return Tokenizer::byte_level();
  if (arg.rfind("vocab:", 0) == 0) return Tokenizer::from_vocab_file(arg.substr(6));
  throw std::invalid_argument("unknown tokenizer '" + arg + "' (expected byte or vocab:<file>)");
}

/// A directory of text files becomes one document per file (sorted order); a
/// file is read as a flat Markov source description.
TokenDataset ingest_input(const std::string& in, const std::string& tokenizer, std::int64_t ctx,
                          double val_fraction, std::uint64_t seed) {
  if (fs::is_directory(in)) {
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(in))
      if (entry.is_regular_file()) paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw std::runtime_error("ingest: no files in " + in);
    std::vector<std::string> texts;
    for (const auto& p : paths) texts.push_back(slurp(p.string()));
    return tokenize_corpus(texts, tokenizer_from_arg(tokenizer), ctx, val_fraction, seed);
  }
  const Config spec = Config::load(in);
  if (spec.get_str("kind") != "markov")
    throw std::runtime_error("ingest: " + in + " is neither a directory nor a markov spec (kind = markov)");
  const std::int64_t states = spec.get_i64("markov.states");
  const double entropy = spec.get_f64("markov.entropy_nats");
  const std::int64_t tokens = spec.get_i64("markov.tokens");
  const std::uint64_t sample_seed = static_cast<std::uint64_t>(spec.get_i64("markov.seed", 1));
  const MarkovSource source = MarkovSource::with_entropy(states, entropy);
  const std::vector<std::int32_t> stream = source.sample(tokens, sample_seed);
  // One pad id on top of the state alphabet.
  return TokenDataset::pack(chunk_stream(stream, ctx), states + 1, ctx, val_fraction, seed);
}

/// Method-specific cost model from the flat config: the regressor term exists
/// only for the hint-based methods, and a cached teacher costs nothing.
CostModel cost_model_for(Method method, const ModelConfig& mc, const Config& cfg) {
  std::int64_t reg_params = 0;
  std::int64_t teacher_width = 0;
  if (method == Method::HLDC || method == Method::HLDF) {
    teacher_width = cfg.get_i64("distill.teacher_width", mc.d_emb);
    RegressorConfig rc;
    rc.kind = method == Method::HLDC ? RegressorKind::Linear : RegressorKind::Mlp;
    rc.input_dim = mc.d_emb;
    rc.output_dim = teacher_width;
    reg_params = regressor_param_count(rc);
  }
  const double teacher_cost = method == Method::NLL ? 0.0 : cfg.get_f64("distill.teacher_cost", 0.0);
  return cost_model_from(mc, reg_params, teacher_cost, teacher_width);
}

int cmd_ingest(const std::string& in, const std::string& tokenizer, std::int64_t ctx,
               const std::string& out, double val_fraction, std::uint64_t seed) {
  const TokenDataset ds = ingest_input(in, tokenizer, ctx, val_fraction, seed);
  ds.save(out);
  nlohmann::json j;
  j["vocab"] = ds.vocab_size();
  j["context"] = ds.context_length();
  j["train_sequences"] = ds.num_sequences(TokenDataset::Split::Train);
  j["val_sequences"] = ds.num_sequences(TokenDataset::Split::Val);
  j["digest"] = ds.payload_digest();
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_cache_teacher(const std::string& model_path, const std::string& corpus, std::int64_t layer,
                      std::int64_t top_k, const std::string& out) {
  const Transformer<float> teacher = load_checkpoint(model_path);
  const TokenDataset ds = TokenDataset::load(corpus);
  const CacheHeader header =
      cache_teacher(teacher, ds, TokenDataset::Split::Train, layer, top_k, out);
  nlohmann::json j;
  j["sequences"] = header.num_sequences;
  j["vocab"] = header.vocab_size;
  j["top_k"] = header.top_k;
  j["d_t"] = header.d_t;
  j["teacher_layer"] = header.teacher_layer;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_plan_flops(const std::string& method_name_arg, const std::string& config_path, double ot,
                   double p1) {
  const Method method = method_from_name(method_name_arg);
  const Config cfg = Config::load(config_path);
  const ModelConfig mc = model_config_from(cfg);
  const std::int64_t batch = cfg.get_i64("optim.batch_size", 16);
  const CostModel cm = cost_model_for(method, mc, cfg);
  const FlopsPlan p = plan(method, cm, ot_budget(ot, cm), batch * mc.context_length, p1);
  std::cout << plan_to_json(p);
  return 0;
}

int cmd_train(const std::string& method_name_arg, const std::string& config_path,
              const std::string& plan_path, const std::string& cache_path, std::uint64_t seed,
              const std::string& out_dir) {
  const Method method = method_from_name(method_name_arg);
  const Config cfg = Config::load(config_path);
  const ModelConfig mc = model_config_from(cfg);
  const TrainConfig tc = train_config_from(cfg);
  const FlopsPlan run_plan = plan_from_json(slurp(plan_path));
  const TokenDataset ds = TokenDataset::load(cfg.get_str("data.tokens"));

  std::optional<CacheReader> cache;
  if (method != Method::NLL) {
    const std::string resolved = !cache_path.empty() ? cache_path : cfg.get_str("data.cache", "");
    if (!resolved.empty()) cache.emplace(resolved);
  }

  const RunResult<float> res =
      run<float>(method, mc, tc, run_plan, ds, cache ? &*cache : nullptr, seed);

  fs::create_directories(out_dir);
  spit((fs::path(out_dir) / "metrics.csv").string(), metrics_to_csv(res.metrics));
  save_checkpoint(res.model, (fs::path(out_dir) / "model.ckpt").string());
  if (res.final_eval)
    spit((fs::path(out_dir) / "eval.json").string(), eval_report_to_json(*res.final_eval));

  nlohmann::json j;
  j["method"] = distlab::method_name(method);
  j["steps"] = res.metrics.size();
  j["realized_flops"] = res.realized_flops;
  j["planned_passes"] = res.planned_passes;
  if (res.final_eval) j["val_logppl"] = res.final_eval->value;
  j["out"] = out_dir;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& dataset, const std::string& metric,
             const std::string& norm, const std::string& split_arg) {
  const Transformer<float> model = load_checkpoint(model_path);
  EvalReport report;
  if (metric == "logppl") {
    const TokenDataset ds = TokenDataset::load(dataset);
    TokenDataset::Split split;
    if (split_arg == "auto")
      split = detail::split_has_scorable_window(ds, TokenDataset::Split::Val)
                  ? TokenDataset::Split::Val
                  : TokenDataset::Split::Train;
    else if (split_arg == "val")
      split = TokenDataset::Split::Val;
    else if (split_arg == "train")
      split = TokenDataset::Split::Train;
    else
      throw std::invalid_argument("unknown split '" + split_arg + "' (expected auto, train, or val)");
    report = log_perplexity(model, ds, split);
  } else if (metric == "mc") {
    report = mc_error_rate(model, load_mc_items(dataset), choice_norm_from_name(norm));
  } else {
    throw std::invalid_argument("unknown metric '" + metric + "' (expected logppl or mc)");
  }
  std::cout << eval_report_to_json(report);
  return 0;
}

int cmd_grid(const std::string& spec_path, const std::string& config_path, const std::string& out_dir) {
  const GridSpec spec = grid_spec_from_json(slurp(spec_path));
  const Config cfg = Config::load(config_path);
  const ModelConfig mc = model_config_from(cfg);
  const TrainConfig base = train_config_from(cfg);
  const TokenDataset ds = TokenDataset::load(cfg.get_str("data.tokens"));
  const std::string cache_path = cfg.get_str("data.cache", "");

  std::vector<MultipleChoiceItem> mc_items;
  const std::string mc_path = cfg.get_str("data.mc", "");
  if (!mc_path.empty()) mc_items = load_mc_items(mc_path);

  const std::vector<RunRecord> records =
      run_grid(spec, mc, base, ds, cache_path, out_dir, mc_items.empty() ? nullptr : &mc_items);
  std::cout << records_to_csv(records);
  return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& kind, const std::string& metric) {
  const std::vector<RunRecord> records = load_records(runs_dir);
  if (kind == "full") {
    std::cout << records_to_csv(records);
  } else if (kind == "best") {
    std::cout << best_to_csv(best_table(records, {metric}));
  } else if (kind == "scatter") {
    std::cout << improvement_to_csv(pointwise_improvement(records, metric));
  } else if (kind == "hist") {
    std::cout << "method,delta\n";
    char buf[40];
    for (const ImprovementRow& row : pointwise_improvement(records, metric)) {
      std::snprintf(buf, sizeof(buf), "%.17g", row.delta);
      std::cout << distlab::method_name(row.method) << ',' << buf << "\n";
    }
  } else {
    throw std::invalid_argument("unknown report kind '" + kind +
                                "' (expected hist, scatter, best, or full)");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale distillation lab"};
  app.require_subcommand(1);

  std::string in, tokenizer = "byte", out, model_path, corpus, config_path, plan_path;
  std::string cache_path, dataset, metric = "logppl", norm = "pertoken", split = "auto";
  std::string spec_path, runs_dir, kind = "full", report_metric = "val_logppl", method;
  std::int64_t ctx = 0, layer = 0, top_k = 0;
  std::uint64_t seed = 0;
  double val_fraction = 0.1, ot = 1.0, p1 = 0.0;

  CLI::App* ingest = app.add_subcommand("ingest", "tokenize a corpus or sample a Markov source");
  ingest->add_option("--in", in, "text directory or markov spec file")->required();
  ingest->add_option("--tokenizer", tokenizer, "byte or vocab:<file>");
  ingest->add_option("--ctx", ctx, "context length")->required();
  ingest->add_option("--out", out, "output token dataset")->required();
  ingest->add_option("--val-fraction", val_fraction, "held-out document fraction");
  ingest->add_option("--seed", seed, "packing / split seed");

  CLI::App* cache = app.add_subcommand("cache-teacher", "precompute teacher targets over a corpus");
  cache->add_option("--model", model_path, "teacher checkpoint")->required();
  cache->add_option("--corpus", corpus, "token dataset")->required();
  cache->add_option("--layer", layer, "teacher residual layer to record")->required();
  cache->add_option("--top-k", top_k, "logits kept per position")->required();
  cache->add_option("--out", out, "output cache file")->required();

  CLI::App* plan_cmd = app.add_subcommand("plan-flops", "split an OT budget into training steps");
  plan_cmd->add_option("--method", method, "nll, kd, hldc, or hldf")->required();
  plan_cmd->add_option("--config", config_path, "flat run config")->required();
  plan_cmd->add_option("--ot", ot, "budget in overtraining units");
  plan_cmd->add_option("--p1", p1, "hint-phase budget fraction (hldf)");

  CLI::App* train = app.add_subcommand("train", "execute one budgeted training run");
  train->add_option("--method", method, "nll, kd, hldc, or hldf")->required();
  train->add_option("--config", config_path, "flat run config")->required();
  train->add_option("--plan", plan_path, "plan json from plan-flops")->required();
  train->add_option("--cache", cache_path, "teacher cache (overrides data.cache)");
  train->add_option("--seed", seed, "initialization / data-order seed");
  train->add_option("--out", out, "output directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint");
  eval_cmd->add_option("--model", model_path, "model checkpoint")->required();
  eval_cmd->add_option("--dataset", dataset, "token dataset or mc jsonl")->required();
  eval_cmd->add_option("--metric", metric, "logppl or mc");
  eval_cmd->add_option("--norm", norm, "total or pertoken (mc only)");
  eval_cmd->add_option("--split", split, "auto, train, or val (logppl only)");

  CLI::App* grid = app.add_subcommand("grid", "run every cell of a hyperparameter grid");
  grid->add_option("--spec", spec_path, "grid spec json")->required();
  grid->add_option("--config", config_path, "flat run config with data paths")->required();
  grid->add_option("--out", out, "grid output root")->required();

  CLI::App* report = app.add_subcommand("report", "summarize grid records as CSV");
  report->add_option("--runs", runs_dir, "grid output root")->required();
  report->add_option("--kind", kind, "hist, scatter, best, or full");
  report->add_option("--metric", report_metric, "val_logppl or mc_error");

  CLI11_PARSE(app, argc, argv);

  try {
    if (ingest->parsed()) return cmd_ingest(in, tokenizer, ctx, out, val_fraction, seed);
    if (cache->parsed()) return cmd_cache_teacher(model_path, corpus, layer, top_k, out);
    if (plan_cmd->parsed()) return cmd_plan_flops(method, config_path, ot, p1);
    if (train->parsed()) return cmd_train(method, config_path, plan_path, cache_path, seed, out);
    if (eval_cmd->parsed()) return cmd_eval(model_path, dataset, metric, norm, split);
    if (grid->parsed()) return cmd_grid(spec_path, config_path, out);
    if (report->parsed()) return cmd_report(runs_dir, kind, report_metric);
  } catch (const std::exception& e) {
    std::cerr << "distlab: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
