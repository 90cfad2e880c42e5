#include "distlab/flops.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace distlab {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::NLL: return "NLL";
    case Method::KD: return "KD";
    case Method::HLDC: return "HLDC";
    case Method::HLDF: return "HLDF";
  }
  throw std::logic_error("method_name: unreachable");
}

Method method_from_name(const std::string& name) {
  const std::string n = lower(name);
  if (n == "nll") return Method::NLL;
  if (n == "kd") return Method::KD;
  if (n == "hldc") return Method::HLDC;
  if (n == "hldf") return Method::HLDF;
  throw std::invalid_argument("unknown method '" + name + "' (expected nll, kd, hldc, or hldf)");
}

std::string phase_name(TrainPhase p) { return p == TrainPhase::Hint ? "hint" : "main"; }

TrainPhase phase_from_name(const std::string& name) {
  const std::string n = lower(name);
  if (n == "main") return TrainPhase::Main;
  if (n == "hint") return TrainPhase::Hint;
  throw std::invalid_argument("unknown phase '" + name + "' (expected main or hint)");
}

void CostModel::validate() const {
  auto check = [](double v, const char* what) {
    if (!(v >= 0) || !std::isfinite(v))
      throw std::invalid_argument(std::string("cost model: ") + what + " must be finite and nonnegative");
  };
  check(backbone_params, "backbone_params");
  check(student_width, "student_width");
  check(teacher_width, "teacher_width");
  check(vocab_size, "vocab_size");
  check(regressor_params, "regressor_params");
  check(teacher_cost, "teacher_cost");
}

CostModel cost_model_from(const ModelConfig& student, std::int64_t regressor_params,
                          double teacher_cost, std::int64_t teacher_width) {
  student.validate();
  CostModel cm;
  cm.backbone_params = static_cast<double>(backbone_param_count(student));
  cm.student_width = static_cast<double>(student.d_emb);
  cm.teacher_width = static_cast<double>(teacher_width);
  cm.vocab_size = static_cast<double>(student.vocab_size);
  cm.regressor_params = static_cast<double>(regressor_params);
  cm.teacher_cost = teacher_cost;
  cm.validate();
  return cm;
}

double cost_per_token(Method m, const CostModel& cm) {
  if (m == Method::HLDF)
    throw std::invalid_argument("cost_per_token: HLDF cost is phase-dependent; pass a phase");
  return cost_per_token(m, cm, TrainPhase::Main);
}

double cost_per_token(Method m, const CostModel& cm, TrainPhase phase) {
  cm.validate();
  if (phase == TrainPhase::Hint && m != Method::HLDF)
    throw std::invalid_argument("cost_per_token: only HLDF has a hint phase");
  const double c_data = 6.0 * cm.backbone_params + 6.0 * cm.student_width * cm.vocab_size;
  switch (m) {
    case Method::NLL:
      return c_data;
    case Method::KD:
      return c_data + cm.teacher_cost;
    case Method::HLDC:
      return c_data + cm.teacher_cost + 6.0 * cm.regressor_params;
    case Method::HLDF:
      if (phase == TrainPhase::Hint)
        return 3.0 * cm.backbone_params + 6.0 * cm.regressor_params + cm.teacher_cost / 2.0;
      return c_data + cm.teacher_cost;  // phase 2 is plain KD
  }
  throw std::logic_error("cost_per_token: unreachable");
}

double ot_tokens(double k, const CostModel& cm) {
  if (!(k > 0)) throw std::invalid_argument("ot_tokens: k must be positive");
  cm.validate();
  return k * 20.0 * cm.backbone_params;
}

double ot_budget(double k, const CostModel& cm) {
  return ot_tokens(k, cm) * cost_per_token(Method::NLL, cm);
}

std::int64_t FlopsPlan::total_steps() const {
  std::int64_t n = 0;
  for (const auto& p : phases) n += p.steps;
  return n;
}

FlopsPlan plan(Method m, const CostModel& cm, double budget_flops, std::int64_t tokens_per_step,
               double phase1_fraction) {
  cm.validate();
  if (!(budget_flops > 0) || !std::isfinite(budget_flops))
    throw std::invalid_argument("plan: budget must be positive and finite");
  if (tokens_per_step < 1) throw std::invalid_argument("plan: tokens_per_step must be >= 1");
  if (m == Method::HLDF && (phase1_fraction < 0.0 || phase1_fraction >= 1.0))
    throw std::invalid_argument("plan: phase-1 fraction must lie in [0,1)");

  FlopsPlan out;
  out.method = m;
  out.total_budget_flops = budget_flops;
  out.tokens_per_step = tokens_per_step;
  const double unit = ot_budget(1.0, cm);
  out.ot_units = unit > 0 ? budget_flops / unit : 0.0;

  auto allocate = [&](TrainPhase phase, double cost, double flops) {
    const double step_cost = cost * static_cast<double>(tokens_per_step);
    if (!(step_cost > 0)) throw std::invalid_argument("plan: per-step cost must be positive");
    PhaseAllocation a;
    a.phase = phase;
    a.per_token_cost = cost;
    a.steps = static_cast<std::int64_t>(std::floor(flops / step_cost));
    a.tokens = a.steps * tokens_per_step;
    if (a.steps < 1)
      throw std::invalid_argument("plan: budget too small for one " + phase_name(phase) + " step (" +
                                  std::to_string(flops) + " flops vs " + std::to_string(step_cost) +
                                  " per step)");
    out.phases.push_back(a);
    return static_cast<double>(a.steps) * step_cost;
  };

  double realized = 0;
  if (m == Method::HLDF && phase1_fraction > 0.0) {
    realized += allocate(TrainPhase::Hint, cost_per_token(m, cm, TrainPhase::Hint),
                         phase1_fraction * budget_flops);
    realized += allocate(TrainPhase::Main, cost_per_token(m, cm, TrainPhase::Main),
                         budget_flops - realized);
  } else {
    const double cost = m == Method::HLDF ? cost_per_token(m, cm, TrainPhase::Main)
                                          : cost_per_token(m, cm);
    realized += allocate(TrainPhase::Main, cost, budget_flops);
  }
  out.realized_flops = realized;
  out.leftover_flops = budget_flops - realized;
  return out;
}

FlopsPlan plan_for_steps(Method m, const CostModel& cm, std::int64_t main_steps,
                         std::int64_t tokens_per_step, std::int64_t hint_steps) {
  cm.validate();
  if (main_steps < 1) throw std::invalid_argument("plan_for_steps: need at least one main step");
  if (tokens_per_step < 1) throw std::invalid_argument("plan_for_steps: tokens_per_step must be >= 1");
  if (hint_steps < 0) throw std::invalid_argument("plan_for_steps: hint steps must be >= 0");
  if (hint_steps > 0 && m != Method::HLDF)
    throw std::invalid_argument("plan_for_steps: only HLDF has a hint phase");

  FlopsPlan out;
  out.method = m;
  out.tokens_per_step = tokens_per_step;

  auto push = [&](TrainPhase phase, double cost, std::int64_t steps) {
    PhaseAllocation a;
    a.phase = phase;
    a.per_token_cost = cost;
    a.steps = steps;
    a.tokens = steps * tokens_per_step;
    out.phases.push_back(a);
    return static_cast<double>(steps) * (cost * static_cast<double>(tokens_per_step));
  };

  double realized = 0;
  if (hint_steps > 0) realized += push(TrainPhase::Hint, cost_per_token(m, cm, TrainPhase::Hint), hint_steps);
  const double main_cost =
      m == Method::HLDF ? cost_per_token(m, cm, TrainPhase::Main) : cost_per_token(m, cm);
  realized += push(TrainPhase::Main, main_cost, main_steps);

  out.total_budget_flops = realized;
  out.realized_flops = realized;
  out.leftover_flops = 0;
  const double unit = ot_budget(1.0, cm);
  out.ot_units = unit > 0 ? realized / unit : 0.0;
  return out;
}

std::string plan_to_json(const FlopsPlan& p) {
  nlohmann::json j;
  j["format"] = "distlab-plan-v1";
  j["method"] = method_name(p.method);
  j["total_budget_flops"] = p.total_budget_flops;
  j["tokens_per_step"] = p.tokens_per_step;
  j["ot_units"] = p.ot_units;
  j["realized_flops"] = p.realized_flops;
  j["leftover_flops"] = p.leftover_flops;
  j["phases"] = nlohmann::json::array();
  for (const auto& a : p.phases) {
    j["phases"].push_back({{"phase", phase_name(a.phase)},
                           {"per_token_cost", a.per_token_cost},
                           {"steps", a.steps},
                           {"tokens", a.tokens}});
  }
  return j.dump(2) + "\n";
}

FlopsPlan plan_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("plan: invalid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "distlab-plan-v1")
    throw std::runtime_error("plan: wrong format (expected distlab-plan-v1)");
  FlopsPlan p;
  p.method = method_from_name(j.at("method").get<std::string>());
  p.total_budget_flops = j.at("total_budget_flops").get<double>();
  p.tokens_per_step = j.at("tokens_per_step").get<std::int64_t>();
  p.ot_units = j.at("ot_units").get<double>();
  p.realized_flops = j.at("realized_flops").get<double>();
  p.leftover_flops = j.at("leftover_flops").get<double>();
  for (const auto& a : j.at("phases")) {
    PhaseAllocation pa;
    pa.phase = phase_from_name(a.at("phase").get<std::string>());
    pa.per_token_cost = a.at("per_token_cost").get<double>();
    pa.steps = a.at("steps").get<std::int64_t>();
    pa.tokens = a.at("tokens").get<std::int64_t>();
    if (pa.steps < 1 || pa.tokens != pa.steps * p.tokens_per_step)
      throw std::runtime_error("plan: inconsistent phase allocation");
    p.phases.push_back(pa);
  }
  if (p.phases.empty()) throw std::runtime_error("plan: no phases");
  return p;
}

}  // namespace distlab
