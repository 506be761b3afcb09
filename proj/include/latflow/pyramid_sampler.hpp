#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "latflow/context.hpp"
#include "latflow/latent.hpp"
#include "latflow/pyramid_flow.hpp"
#include "latflow/rational.hpp"
#include "latflow/rng.hpp"

namespace latflow {

// Integration state for one section. The prediction buffer holds a single
// previous model output (corrector order 2); it must never carry entries across
// a stage transition.
struct SamplerState {
    DLatent x;
    std::int64_t stage = 1;
    std::int64_t step_index = 0;           // steps taken inside the current stage
    double t_lo = 0.0, t_hi = 1.0;         // valid coordinate interval for the current stage
    bool has_prev = false;
    DLatent u_prev;
    double t_prev = 0.0;
    std::int64_t last_update_order = 0;    // 1 = plain update, 2 = corrector (instrumentation)
};

using VelocityEval = std::function<DLatent(const DLatent& x, double t)>;

// One integration step from t_prev down to t_next. The first step of a stage
// applies the plain update x += u * (t_next - t_prev); later steps extrapolate
// u to the interval midpoint from the buffered previous output (nonuniform
// two-step corrector; equals the classic two-step scheme on a uniform grid).
void pc_step(SamplerState& state, const VelocityEval& u_eval, double t_prev, double t_next);

// Variance-matching rule for the transition correction noise:
// gamma^2 = max(0, sigma_target^2 - sigma_up^2).
double renoise_gamma(double sigma_target_sq, double sigma_up_sq);

// Replicate 2x in both spatial directions, add gamma * standard normal noise,
// advance the stage, and clear the prediction buffer.
void stage_transition(SamplerState& state, std::int64_t next_stage, Rng& rng, double gamma_renoise);

// u = u_uncond + scale * (u_cond - u_uncond)
DLatent cfg_combine(const DLatent& u_cond, const DLatent& u_uncond, double scale);
Latent cfg_combine(const Latent& u_cond, const Latent& u_uncond, double scale);

// Velocity model for a whole section: predicts du/d(blend) at the given stage
// resolution. `conditional` = false requests the prompt-free prediction used by
// the guidance combination.
using SectionModel = std::function<DLatent(const DLatent& x, const HistoryContext& history,
                                           const PromptEmbedding& text, double lambda, std::int64_t stage,
                                           bool conditional)>;

// Optional capture of a generation run: the initial noise and the terminal
// state of every stage (at that stage's resolution, before the transition).
struct SectionTrace {
    DLatent z;
    std::vector<DLatent> stage_x;
};

// Generate one section: seeded Gaussian noise at 1/2^(K-1) resolution, N_k
// corrector steps per stage on the shifted blend grid, upsample + renoise
// between stages. gamma_renoise < 0 selects the variance-matching rule with a
// unit-variance target (stage entries are unit Gaussians in this engine).
// Deterministic for a fixed (seed, schedule, model).
Latent sample_section(const SectionModel& model, const HistoryContext& history, const PromptEmbedding& text,
                      const StageSchedule& schedule, std::uint64_t seed, double cfg_scale,
                      std::int64_t section_frames = 4, double gamma_renoise = -1.0,
                      SectionTrace* trace = nullptr);

// Analytical cost accounting, exact rationals throughout.
struct CostModel {
    std::int64_t layers = 2;
    std::int64_t d_model = 32;
    std::int64_t batch = 1;
    Rat alpha{2};      // linear-term coefficient: alpha * B * l * D^2 per layer
    Rat beta{4};       // attention-term coefficient: beta * B * l^2 * D per layer
    Rat gamma_act{1};  // activation-term coefficient: gamma * B * l * D per layer

    void validate() const;
};

struct CostReport {
    TokenBudget hist;            // tiered history tokens per term and total
    Rat hist_baseline;           // every history frame at the finest kernel
    Rat hist_ratio;              // baseline / tiered
    Rat noisy_factor;            // mean per-step noisy tokens / full-resolution tokens
    Rat noisy_ratio;             // inverse of noisy_factor
    Rat noisy_avg_tokens;        // noisy_factor * frames * H * W
    Rat noisy_token_steps;       // sum over stages of steps_k * noisy tokens at stage k
    Rat attn_flop_ratio_hist;    // quadratic in the token ratio
    Rat linear_flops, attn_flops, act_flops, total_flops;

    std::string str() const;
};

// Token counts use the plan's kernels for history and raw per-frame positions
// for the noisy stream (matching the published accounting); FLOP totals price
// each stage's joint stream of history + noisy tokens.
CostReport cost_report(const StageSchedule& schedule, const MemoryPlan& plan, const CostModel& cm,
                       std::int64_t section_frames);

}  // namespace latflow
