#pragma once

// AdamW with warmup schedules and the budgeted training loops: single-phase
// runs for the plain, logit-matching and joint objectives, plus the two-phase
// sequential protocol (hint training, then logit matching from a fresh
// optimizer). Every run is driven by a FlopsPlan and logs per-step metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "distlab/config.hpp"
#include "distlab/data.hpp"
#include "distlab/eval.hpp"
#include "distlab/flops.hpp"
#include "distlab/model.hpp"
#include "distlab/objectives.hpp"
#include "distlab/teacher_cache.hpp"
#include "distlab/tensor.hpp"

namespace distlab {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

enum class ScheduleKind { Wsd, ConstantWithWarmup };

/// Warmup-stable-decay or warmup-then-flat. Steps are 1-based update indices;
/// lr_at(0) is the warmup origin and lr_at(total_steps) the final value.
struct Schedule {
  ScheduleKind kind = ScheduleKind::Wsd;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double peak_lr = 1.0;
  double decay_fraction = 0.1;  // trailing fraction of steps spent decaying
  double floor_ratio = 0.01;    // lr at total_steps, as a fraction of peak

  void validate() const;
};

double lr_at(const Schedule& s, std::int64_t step);

/// Desk-scale warmup default: max(20, 2% of total), but always < total.
std::int64_t default_warmup(std::int64_t total_steps);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamwConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.1;

  void validate() const;
};

/// Decoupled-decay AdamW over a fixed parameter set. The set is chosen at
/// construction, so a phase that must not touch certain parameters simply
/// never registers them. Moments are kept in double regardless of the
/// parameter scalar.
template <typename S>
class AdamW {
 public:
  explicit AdamW(std::vector<NamedParam<S>> params, AdamwConfig cfg = {})
      : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    if (params_.empty()) throw std::invalid_argument("adamw: empty parameter set");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(ArrayX<double>::Zero(p.tensor.numel()));
      v_.push_back(ArrayX<double>::Zero(p.tensor.numel()));
    }
  }

  /// One update: decay, moment update, bias-corrected step. Parameters whose
  /// gradient was never populated this step are treated as zero-gradient.
  void step(double lr) {
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("adamw: lr must be finite and >= 0");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& vals = params_[i].tensor.values();
      ArrayX<double> g = params_[i].tensor.has_grad()
                             ? params_[i].tensor.grad().template cast<double>().eval()
                             : ArrayX<double>::Zero(vals.size()).eval();
      if (!g.allFinite())
        throw std::runtime_error("adamw: non-finite gradient in " + params_[i].name + " at update " +
                                 std::to_string(t_));
      if (cfg_.weight_decay != 0.0) vals *= static_cast<S>(1.0 - lr * cfg_.weight_decay);
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
      const ArrayX<double> update = lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + cfg_.eps);
      vals -= update.cast<S>();
    }
  }

  std::int64_t update_count() const { return t_; }
  const std::vector<NamedParam<S>>& params() const { return params_; }

 private:
  AdamwConfig cfg_;
  std::vector<NamedParam<S>> params_;
  std::vector<ArrayX<double>> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Run configuration and metrics
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 3e-4;        // peak LR of the main (WSD) phase
  double hint_lr = -1.0;   // peak LR of the hint phase; -1 means use lr
  std::int64_t batch_size = 16;
  std::int64_t warmup_steps = -1;  // -1: max(20, 2% of the phase's steps)
  double decay_fraction = 0.1;
  double floor_ratio = 0.01;
  std::int64_t eval_every = 0;  // 0: evaluate only at the final step
  AdamwConfig optimizer;
  DistillConfig distill;

  void validate() const;
};

/// One training step's log line. Loss components that the objective did not
/// compute stay NaN and serialize as empty CSV fields.
struct MetricsRow {
  std::int64_t step = 0;  // 1-based, global across phases
  TrainPhase phase = TrainPhase::Main;
  double lr = 0.0;
  double loss = 0.0;
  double data_loss = std::numeric_limits<double>::quiet_NaN();
  double logit_loss = std::numeric_limits<double>::quiet_NaN();
  double emb_loss = std::numeric_limits<double>::quiet_NaN();
  double cum_flops = 0.0;
  double eval_logppl = std::numeric_limits<double>::quiet_NaN();
};

std::string metrics_csv_header();
std::string metrics_to_csv(const std::vector<MetricsRow>& rows);

/// Maps the flat run-config keys onto the typed configs. Architecture keys
/// (model.layers, model.d_emb, model.heads, model.d_ff, model.vocab,
/// model.context) are required; model.tie_embeddings and model.rms_eps
/// default. Every optim.* and distill.* key defaults to the struct value, so
/// a config file only states what it changes.
ModelConfig model_config_from(const Config& cfg);
TrainConfig train_config_from(const Config& cfg);

template <typename S>
struct RunHooks {
  /// Called after each phase finishes, with the model as it stands.
  std::function<void(TrainPhase, const Transformer<S>&)> after_phase;
};

template <typename S>
struct RunResult {
  Transformer<S> model;
  std::vector<MetricsRow> metrics;
  double realized_flops = 0.0;
  double planned_passes = 0.0;  // planned tokens / train-corpus tokens
  std::optional<EvalReport> final_eval;
};

// ---------------------------------------------------------------------------
// The run loop
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t resolve_warmup(std::int64_t configured, std::int64_t total) {
  const std::int64_t w = configured >= 0 ? configured : default_warmup(total);
  return std::max<std::int64_t>(0, std::min(w, total - 1));
}

/// Batch of valid-prefix windows for the given train-sequence indices.
/// Windows with fewer than two tokens predict nothing and are dropped.
inline Batch usable_batch(const TokenDataset& ds, const std::vector<std::int64_t>& indices) {
  Batch batch;
  for (std::int64_t i : indices) {
    const std::int64_t len = ds.valid_len(TokenDataset::Split::Train, i);
    if (len < 2) continue;
    batch.push_back({i, ds.sequence(TokenDataset::Split::Train, i).subspan(0, static_cast<std::size_t>(len))});
  }
  return batch;
}

inline bool split_has_scorable_window(const TokenDataset& ds, TokenDataset::Split split) {
  for (std::int64_t i = 0; i < ds.num_sequences(split); ++i)
    if (ds.valid_len(split, i) >= 2) return true;
  return false;
}

}  // namespace detail

/// Executes a FlopsPlan from a fresh seed-initialized model. Single-phase
/// methods run their objective for the plan's steps; the two-phase plan first
/// optimizes the student prefix plus regressor under a constant-with-warmup
/// schedule, then restarts — fresh optimizer, fresh WSD schedule sized to the
/// remaining steps, regressor discarded — on the logit-matching objective.
/// One data cursor spans all phases, so a plan whose hint phase is empty
/// consumes batches exactly like the single-phase logit-matching run.
template <typename S>
RunResult<S> run(Method method, const ModelConfig& model_cfg, const TrainConfig& tc,
                 const FlopsPlan& plan, const TokenDataset& ds, const CacheReader* cache,
                 std::uint64_t seed, const RunHooks<S>& hooks = {}) {
  tc.validate();
  if (plan.method != method)
    throw std::invalid_argument("run: plan was built for " + method_name(plan.method) + ", not " +
                                method_name(method));
  if (plan.phases.empty()) throw std::invalid_argument("run: plan has no phases");
  if (method != Method::NLL && cache == nullptr)
    throw std::invalid_argument("run: " + method_name(method) + " needs a teacher cache");
  if (plan.tokens_per_step != tc.batch_size * ds.context_length())
    throw std::invalid_argument("run: plan expects " + std::to_string(plan.tokens_per_step) +
                                " tokens per step, but batch x context = " +
                                std::to_string(tc.batch_size * ds.context_length()));
  if (!detail::split_has_scorable_window(ds, TokenDataset::Split::Train))
    throw std::invalid_argument("run: training split has no window with two tokens");

  DistillConfig dc = tc.distill;
  if (dc.student_layer < 0 && (method == Method::HLDC || method == Method::HLDF))
    dc.student_layer = median_layer_index(model_cfg);

  Transformer<S> model(model_cfg, seed);

  const bool has_hint_phase =
      std::any_of(plan.phases.begin(), plan.phases.end(),
                  [](const PhaseAllocation& p) { return p.phase == TrainPhase::Hint; });
  std::optional<Regressor<S>> reg;
  if (method == Method::HLDC || (method == Method::HLDF && has_hint_phase)) {
    RegressorConfig rc;
    rc.kind = method == Method::HLDC ? RegressorKind::Linear : RegressorKind::Mlp;
    rc.input_dim = model_cfg.d_emb;
    rc.output_dim = static_cast<std::int64_t>(cache->header().d_t);
    reg.emplace(rc, seed);
  }

  DataCursor cursor(ds, tc.batch_size, seed);

  double planned_tokens = 0;
  for (const auto& pa : plan.phases) planned_tokens += static_cast<double>(pa.tokens);
  const double corpus_tokens = static_cast<double>(ds.num_sequences(TokenDataset::Split::Train)) *
                               static_cast<double>(ds.context_length());
  const double planned_passes = planned_tokens / corpus_tokens;
  if (planned_passes > 3.0)
    std::cerr << "warning: plan revisits the training corpus " << planned_passes
              << " times; token reuse is high\n";

  const bool can_eval = detail::split_has_scorable_window(ds, TokenDataset::Split::Val);

  std::vector<MetricsRow> rows;
  rows.reserve(static_cast<std::size_t>(plan.total_steps()));
  std::optional<EvalReport> final_eval;
  const std::int64_t global_total = plan.total_steps();
  double completed_flops = 0.0;
  std::int64_t global_step = 0;

  for (const PhaseAllocation& pa : plan.phases) {
    const bool hint = pa.phase == TrainPhase::Hint;

    Schedule sched;
    sched.kind = hint ? ScheduleKind::ConstantWithWarmup : ScheduleKind::Wsd;
    sched.total_steps = pa.steps;
    sched.warmup_steps = detail::resolve_warmup(tc.warmup_steps, pa.steps);
    sched.peak_lr = hint && tc.hint_lr > 0 ? tc.hint_lr : tc.lr;
    sched.decay_fraction = tc.decay_fraction;
    sched.floor_ratio = tc.floor_ratio;
    sched.validate();

    // The phase's trainable set; anything outside it is untouchable by
    // construction, weight decay included.
    std::vector<NamedParam<S>> trainable;
    if (hint) {
      for (const std::string& name : model.prefix_param_names(dc.student_layer))
        trainable.push_back({name, model.param(name)});
      for (const auto& p : reg->params()) trainable.push_back(p);
    } else {
      trainable = model.params();
      if (method == Method::HLDC) {
        for (const auto& p : reg->params()) trainable.push_back(p);
      }
    }
    AdamW<S> opt(trainable, tc.optimizer);

    const double step_cost = pa.per_token_cost * static_cast<double>(plan.tokens_per_step);

    for (std::int64_t k = 1; k <= pa.steps; ++k) {
      ++global_step;
      Batch batch = detail::usable_batch(ds, cursor.next_batch());
      while (batch.empty()) batch = detail::usable_batch(ds, cursor.next_batch());

      MetricsRow row;
      row.step = global_step;
      row.phase = pa.phase;
      row.lr = lr_at(sched, k);

      {
        Tape<S> tape;
        auto compute = [&]() -> Tensor<S> {
          if (method == Method::NLL) {
            std::vector<Tensor<S>> terms;
            terms.reserve(batch.size());
            for (const BatchItem& item : batch)
              terms.push_back(nll_loss(model.forward(item.tokens).logits, item.tokens));
            Tensor<S> total = detail::batch_mean(std::move(terms));
            row.data_loss = static_cast<double>(total.value());
            return total;
          }
          if (hint) {
            Tensor<S> total = hint_batch_loss(batch, model, *cache, *reg, dc);
            row.emb_loss = static_cast<double>(total.value());
            return total;
          }
          if (method == Method::HLDC) {
            LossParts<S> parts = hldc_loss_parts(batch, model, *cache, *reg, dc);
            if (dc.effective_beta() != 0.0) row.data_loss = static_cast<double>(parts.data.value());
            if (dc.alpha != 0.0) row.logit_loss = static_cast<double>(parts.logits.value());
            if (dc.gamma != 0.0) row.emb_loss = static_cast<double>(parts.emb.value());
            return parts.total;
          }
          LossParts<S> parts = kd_loss_parts(batch, model, *cache, dc);
          if (dc.alpha != 1.0) row.data_loss = static_cast<double>(parts.data.value());
          if (dc.alpha != 0.0) row.logit_loss = static_cast<double>(parts.logits.value());
          return parts.total;
        };
        Tensor<S> total = compute();
        row.loss = static_cast<double>(total.value());
        if (!std::isfinite(row.loss))
          throw std::runtime_error("run: non-finite loss at step " + std::to_string(global_step));
        for (auto& p : trainable) p.tensor.clear_grad();
        tape.backward(total);
      }
      opt.step(row.lr);

      row.cum_flops = completed_flops + static_cast<double>(k) * step_cost;

      const bool eval_now =
          can_eval && ((tc.eval_every > 0 && global_step % tc.eval_every == 0) || global_step == global_total);
      if (eval_now) {
        EvalReport er = log_perplexity(model, ds, TokenDataset::Split::Val);
        row.eval_logppl = er.value;
        if (global_step == global_total) final_eval = std::move(er);
      }
      rows.push_back(row);
    }

    completed_flops += static_cast<double>(pa.steps) * step_cost;
    if (hooks.after_phase) hooks.after_phase(pa.phase, model);
  }

  return RunResult<S>{std::move(model), std::move(rows), completed_flops, planned_passes,
                      std::move(final_eval)};
}

}  // namespace distlab
