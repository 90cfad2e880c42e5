#pragma once

// Exact per-token FLOPs accounting for the four training methods,
// overtraining-unit budgets, and compute-matched step allocation. Everything
// here is pure arithmetic over a small cost model; plans serialize to JSON so
// the trainer can consume exactly what the planner printed.

#include <cstdint>
#include <string>
#include <vector>

#include "distlab/model.hpp"

namespace distlab {

enum class Method { NLL, KD, HLDC, HLDF };

/// Canonical display names ("NLL", "KD", "HLDC", "HLDF").
std::string method_name(Method m);
/// Parses a method name, case-insensitively.
Method method_from_name(const std::string& name);

/// Which half of a run a per-token cost refers to. Single-phase methods train
/// entirely in Main; HLDF spends its first budget slice in Hint.
enum class TrainPhase { Main, Hint };

std::string phase_name(TrainPhase p);
TrainPhase phase_from_name(const std::string& name);

/// The quantities the per-token cost formulas depend on. FLOPs are doubles
/// throughout: paper-scale budgets overflow 64-bit integers.
struct CostModel {
  double backbone_params = 0;   // N: student params outside the embedding tables
  double student_width = 0;     // d_S
  double teacher_width = 0;     // d_T (bookkeeping; enters costs only via N_reg)
  double vocab_size = 0;        // V
  double regressor_params = 0;  // N_reg
  double teacher_cost = 0;      // per-token cost of teacher targets; 0 when cached

  void validate() const;
};

/// Cost model for a student configuration. The regressor parameter count and
/// the per-token teacher cost depend on the method; pass 0 when absent.
CostModel cost_model_from(const ModelConfig& student, std::int64_t regressor_params = 0,
                          double teacher_cost = 0.0, std::int64_t teacher_width = 0);

/// Per-token training cost. Building blocks (per token): full forward 2N,
/// half-depth forward N, de-embedding 2·d_S·V, regressor 2·N_reg, and a
/// backward pass costing twice the corresponding forward. Hence
///   C_data = 6N + 6·d_S·V
///   C_KD   = C_data + teacher_cost
///   C_HLDC = C_KD + 6·N_reg
///   C_HT   = 3N + 6·N_reg + teacher_cost/2
/// HLDF has no single per-token cost; use the phase overload.
double cost_per_token(Method m, const CostModel& cm);
double cost_per_token(Method m, const CostModel& cm, TrainPhase phase);

/// One overtraining unit is the compute to train the student on 20 tokens per
/// backbone parameter at C_data; OT_k scales it linearly.
double ot_budget(double k, const CostModel& cm);
/// Token count behind OT_k: k · 20 · N.
double ot_tokens(double k, const CostModel& cm);

struct PhaseAllocation {
  TrainPhase phase = TrainPhase::Main;
  double per_token_cost = 0;
  std::int64_t steps = 0;
  std::int64_t tokens = 0;  // steps * tokens_per_step
};

struct FlopsPlan {
  Method method = Method::NLL;
  double total_budget_flops = 0;
  std::int64_t tokens_per_step = 0;  // batch size x context length
  std::vector<PhaseAllocation> phases;
  double ot_units = 0;       // budget expressed in OT_1 units of the cost model
  double realized_flops = 0; // sum over phases of steps * tokens_per_step * cost
  double leftover_flops = 0; // forfeited remainder, always < one step's cost

  std::int64_t total_steps() const;
};

/// Splits a FLOPs budget into whole training steps. NLL/KD/HLDC get a single
/// phase with floor(budget / step cost) steps. HLDF spends phase1_fraction of
/// the budget in Hint at C_HT, then the remainder in Main at C_KD; a zero
/// fraction drops the hint phase entirely, making the plan identical to KD's.
/// Leftover FLOPs smaller than one step are forfeited and reported.
FlopsPlan plan(Method m, const CostModel& cm, double budget_flops, std::int64_t tokens_per_step,
               double phase1_fraction = 0.0);

/// Plan with explicitly chosen step counts instead of a budget — the entry
/// point for desk runs sized in steps. hint_steps is HLDF-only; the realized
/// accounting matches plan()'s exactly and nothing is left over.
FlopsPlan plan_for_steps(Method m, const CostModel& cm, std::int64_t main_steps,
                         std::int64_t tokens_per_step, std::int64_t hint_steps = 0);

/// JSON round trip for plan files ("distlab-plan-v1").
std::string plan_to_json(const FlopsPlan& p);
FlopsPlan plan_from_json(const std::string& text);

}  // namespace distlab
