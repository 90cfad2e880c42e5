#include "distlab/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace distlab {

void Schedule::validate() const {
  if (total_steps < 1) throw std::invalid_argument("schedule: total_steps must be >= 1");
  if (warmup_steps < 0) throw std::invalid_argument("schedule: warmup_steps must be >= 0");
  if (warmup_steps >= total_steps) throw std::invalid_argument("schedule: warmup must be < total");
  if (!(peak_lr > 0) || !std::isfinite(peak_lr))
    throw std::invalid_argument("schedule: peak_lr must be positive and finite");
  if (!(decay_fraction >= 0.0 && decay_fraction < 1.0))
    throw std::invalid_argument("schedule: decay_fraction outside [0,1)");
  if (!(floor_ratio > 0.0 && floor_ratio <= 1.0))
    throw std::invalid_argument("schedule: floor_ratio outside (0,1]");
}

double lr_at(const Schedule& s, std::int64_t step) {
  s.validate();
  if (step <= 0) return s.warmup_steps > 0 ? 0.0 : s.peak_lr;
  if (step <= s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.kind == ScheduleKind::ConstantWithWarmup) return s.peak_lr;

  const double total = static_cast<double>(s.total_steps);
  const double onset = (1.0 - s.decay_fraction) * total;
  const double pos = std::min(static_cast<double>(step), total);
  if (pos <= onset || s.decay_fraction == 0.0) return s.peak_lr;
  // Linear from peak at onset down to peak*floor at total; the endpoints are
  // computed exactly rather than through 1-f arithmetic.
  const double f = (pos - onset) / (total - onset);
  const double floor_lr = s.peak_lr * s.floor_ratio;
  return floor_lr + (s.peak_lr - floor_lr) * (1.0 - f);
}

std::int64_t default_warmup(std::int64_t total_steps) {
  if (total_steps < 2) return 0;
  const std::int64_t two_percent = total_steps / 50;
  return std::min(std::max<std::int64_t>(20, two_percent), total_steps - 1);
}

void AdamwConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adamw: beta1 outside [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adamw: beta2 outside [0,1)");
  if (!(eps > 0.0)) throw std::invalid_argument("adamw: eps must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("adamw: weight_decay must be >= 0");
}

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be positive and finite");
  if (hint_lr != -1.0 && !(hint_lr > 0))
    throw std::invalid_argument("train: hint_lr must be positive (or -1 to reuse lr)");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (warmup_steps < -1) throw std::invalid_argument("train: warmup_steps must be >= 0 (or -1 for auto)");
  if (!(decay_fraction >= 0.0 && decay_fraction < 1.0))
    throw std::invalid_argument("train: decay_fraction outside [0,1)");
  if (!(floor_ratio > 0.0 && floor_ratio <= 1.0))
    throw std::invalid_argument("train: floor_ratio outside (0,1]");
  if (eval_every < 0) throw std::invalid_argument("train: eval_every must be >= 0");
  optimizer.validate();
  distill.validate();
}

namespace {

// %.17g keeps doubles round-trippable, so identical runs print identical CSVs.
std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_header() {
  return "step,phase,lr,loss,data_loss,logit_loss,emb_loss,cum_flops,eval_logppl";
}

std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << metrics_csv_header() << "\n";
  for (const MetricsRow& r : rows) {
    os << r.step << ',' << phase_name(r.phase) << ',' << fmt(r.lr) << ',' << fmt(r.loss) << ','
       << fmt(r.data_loss) << ',' << fmt(r.logit_loss) << ',' << fmt(r.emb_loss) << ','
       << fmt(r.cum_flops) << ',' << fmt(r.eval_logppl) << "\n";
  }
  return os.str();
}

ModelConfig model_config_from(const Config& cfg) {
  ModelConfig mc;
  mc.num_layers = cfg.get_i64("model.layers");
  mc.d_emb = cfg.get_i64("model.d_emb");
  mc.num_heads = cfg.get_i64("model.heads");
  mc.d_ff = cfg.get_i64("model.d_ff");
  mc.vocab_size = cfg.get_i64("model.vocab");
  mc.context_length = cfg.get_i64("model.context");
  mc.rms_eps = cfg.get_f64("model.rms_eps", mc.rms_eps);
  mc.tie_embeddings = cfg.get_bool("model.tie_embeddings", mc.tie_embeddings);
  mc.validate();
  return mc;
}

TrainConfig train_config_from(const Config& cfg) {
  TrainConfig tc;
  tc.lr = cfg.get_f64("optim.lr", tc.lr);
  tc.hint_lr = cfg.get_f64("optim.hint_lr", tc.hint_lr);
  tc.batch_size = cfg.get_i64("optim.batch_size", tc.batch_size);
  tc.warmup_steps = cfg.get_i64("optim.warmup_steps", tc.warmup_steps);
  tc.decay_fraction = cfg.get_f64("optim.decay_fraction", tc.decay_fraction);
  tc.floor_ratio = cfg.get_f64("optim.floor_ratio", tc.floor_ratio);
  tc.eval_every = cfg.get_i64("optim.eval_every", tc.eval_every);
  tc.optimizer.beta1 = cfg.get_f64("optim.beta1", tc.optimizer.beta1);
  tc.optimizer.beta2 = cfg.get_f64("optim.beta2", tc.optimizer.beta2);
  tc.optimizer.eps = cfg.get_f64("optim.eps", tc.optimizer.eps);
  tc.optimizer.weight_decay = cfg.get_f64("optim.weight_decay", tc.optimizer.weight_decay);
  tc.distill.alpha = cfg.get_f64("distill.alpha", tc.distill.alpha);
  tc.distill.beta = cfg.get_f64("distill.beta", tc.distill.beta);
  tc.distill.gamma = cfg.get_f64("distill.gamma", tc.distill.gamma);
  tc.distill.temperature = cfg.get_f64("distill.temperature", tc.distill.temperature);
  tc.distill.top_k = cfg.get_i64("distill.top_k", tc.distill.top_k);
  tc.distill.teacher_layer = cfg.get_i64("distill.teacher_layer", tc.distill.teacher_layer);
  tc.distill.student_layer = cfg.get_i64("distill.student_layer", tc.distill.student_layer);
  tc.distill.phase1_fraction = cfg.get_f64("distill.p1", tc.distill.phase1_fraction);
  tc.validate();
  return tc;
}

}  // namespace distlab
