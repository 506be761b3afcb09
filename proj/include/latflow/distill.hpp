#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "latflow/anti_drift.hpp"
#include "latflow/context.hpp"
#include "latflow/dmat.hpp"
#include "latflow/latent.hpp"
#include "latflow/optim.hpp"
#include "latflow/pyramid_flow.hpp"
#include "latflow/pyramid_sampler.hpp"
#include "latflow/rng.hpp"
#include "latflow/toy_dit.hpp"

namespace latflow {

struct DistillConfig {
    double real_cfg = 3.0;       // guidance weight of the real-score estimator
    double lambda_d = 100.0;     // weight of the smoothness penalty inside the critic loss
    double sigma_d = 0.1;        // perturbation scale of that penalty
    double w_g = 5e-2;           // adversarial weight in the generator objective
    double w_d = 1e-2;           // critic weight in the fake-estimator objective
    std::int64_t ttur_ratio = 5; // fake-estimator updates per generator update

    double beta_a0 = 3.0;              // initial Beta(a,1) shape for noise-level draws
    std::int64_t beta_total_steps = 500;

    double ema_decay = 0.99;
    std::int64_t ema_start = 0;

    std::vector<std::int64_t> gan_taps = {0, 1};  // layer indices feeding the critic heads
    std::int64_t gan_head_dim = 16;
    std::int64_t gan_start = 0;

    std::int64_t crop_h = 0, crop_w = 0;  // critic crop size; 0 = half the input

    void validate() const;
};

// -------- teacher-forced data assembly --------

struct TeacherForcedSample {
    HistoryContext history;  // corrupted per policy, anchor = clip frame 0
    Latent target;           // the final section_frames frames of the clip
};

// Splits a clip into (everything - section) history frames and one target
// section. Real frames are used only as conditioning; one section per sample.
TeacherForcedSample assemble_teacher_forced_sample(const Latent& clip, const MemoryPlan& plan,
                                                   const CorruptionPolicy& policy, Rng& rng,
                                                   std::int64_t section_frames = 3);

// -------- few-step backward simulation over the stage pyramid --------

// Velocity of one section at (x, blend, stage). Implementations that want
// gradients later stash a record per call, in call order.
using StudentFn = std::function<DLatent(const DLatent& x, double lambda, std::int64_t stage)>;

struct SimTrace {
    struct Call {
        double lambda = 1.0;
        std::int64_t stage = 1;
    };
    std::vector<Call> calls;                         // generation order
    std::vector<std::vector<double>> stage_lambdas;  // evaluation grid per stage
    std::vector<DLatent> stage_start;                // blend-1 state per stage
    std::vector<DLatent> stage_x0;                   // terminal estimate per stage

    const DLatent& x0_final() const { return stage_x0.back(); }
};

// Runs the few-step estimate chain: per stage, repeatedly estimate the clean
// state x0 = x - lambda*u and re-embed it on the stage path at the next grid
// blend; between stages upsample and renoise exactly like the sampler
// (gamma < 0 selects the variance-matching rule). steps_per_stage overrides the
// schedule's own step counts.
SimTrace staged_backward_simulation(const StudentFn& student, const DLatent& z,
                                    const StageSchedule& schedule,
                                    const std::vector<std::int64_t>& steps_per_stage,
                                    std::uint64_t seed, double gamma_renoise = -1.0);

// Reverse sweep through a recorded chain. stage_x0_grad holds dL/d(stage_x0[k])
// per stage (empty tensor = no direct gradient there). vjp(i, du) must return
// dL/dx of recorded call i given dL/du, accumulating parameter gradients on the
// side. Returns dL/dz.
using StudentVjp = std::function<DLatent(std::size_t call_index, const DLatent& grad_u)>;
DLatent staged_backward_gradient(const SimTrace& trace, const std::vector<DLatent>& stage_x0_grad,
                                 const StudentVjp& vjp);

// -------- noise-level curriculum --------

// Beta(a,1) shape at training step s: cosine decay from a0 to 1 over the
// configured horizon, then uniform.
double beta_schedule_a(std::int64_t step, const DistillConfig& cfg);

// One noise-level draw tau in [0,1] from Beta(a(step), 1).
double dynamic_renoise(std::int64_t step, const DistillConfig& cfg, Rng& rng);

// -------- distribution-matching gradient --------

// Velocity estimator view: conditional or prompt-free prediction at (x, tau).
using ScoreFn = std::function<DLatent(const DLatent& x_tau, double tau, bool conditional)>;

struct DmdSignal {
    DLatent grad;       // descent direction on x0: raw * (1 - tau) / norm_scale
    DLatent raw;        // clean-estimate difference, fake minus real
    DLatent x_tau;      // the perturbed sample both estimators scored
    double norm_scale;  // mean |raw| (1 when the difference vanishes)
    double tau = 0.0;
};

// Perturbs x0 along the flow path, scores the result with both estimators
// (real side guided by cfg_w, fake side conditional only), and returns the
// normalized clean-estimate difference. The estimators are treated as
// constants; the only tracked dependence on x0 is the path factor (1 - tau).
DmdSignal dmd_generator_grad(const DLatent& x0, const ScoreFn& real_score,
                             const ScoreFn& fake_score, double cfg_w, double tau, Rng& rng);

// -------- adversarial heads --------

// Per-tap activations of the feature trunk for a critic input.
using FeatureFn = std::function<std::vector<DMat>(const Latent& x, double tau)>;

// Small per-tap classifiers over intermediate trunk activations. Each head
// mean-pools the token rows (d_model wide) and maps the pooled vector through
// one hidden layer to a single logit per input stream.
struct GanHeads {
    std::vector<std::int64_t> taps;
    std::vector<DMat> w1, b1, w2, b2;
    FeatureFn features;  // set by the owner; required by the Latent-level loss

    void validate() const;
};

GanHeads make_gan_heads(std::int64_t d_model, const std::vector<std::int64_t>& taps,
                        std::int64_t head_dim, Rng& rng);

std::vector<DMat*> gan_param_ptrs(GanHeads& h);
std::vector<const DMat*> gan_param_ptrs(const GanHeads& h);

// Logit (1 x 1) of head tap_i on one activation matrix (rows x d_model).
DMat gan_head_logits(const GanHeads& h, std::size_t tap_i, const DMat& acts);

struct GanEval {
    double loss_d = 0.0;  // classification terms + lambda_d * ar1
    double loss_g = 0.0;
    double ar1 = 0.0;     // unweighted smoothness penalty

    GanHeads head_grads;  // d loss_d / d head params (features hook unset)
    std::vector<DMat> d_real_taps, d_pert_taps, d_fake_taps;  // d loss_d / d activations
    std::vector<DMat> d_fake_taps_g;                          // d loss_g / d fake activations
};

// Pure loss and gradient computation over already-extracted activations.
// real_pert_taps belongs to the perturbed copy of the real input.
GanEval gan_losses_on_taps(const GanHeads& heads, const std::vector<DMat>& real_taps,
                           const std::vector<DMat>& real_pert_taps,
                           const std::vector<DMat>& fake_taps, const DistillConfig& cfg);

// Latent-level wrapper: perturbs the real crop with sigma_d noise, extracts
// activations via heads.features (called on real, perturbed, fake in that
// order), and delegates. Inputs must already be crops of equal dims.
GanEval gan_losses(const GanHeads& heads, const Latent& real, const Latent& fake, double tau,
                   const DistillConfig& cfg, Rng& rng);

// Generator-side view: adversarial loss over fake activations only, plus its
// activation gradients. Touches no head parameters.
double gan_generator_loss(const GanHeads& heads, const std::vector<DMat>& fake_taps,
                          std::vector<DMat>& d_fake_taps);

// Fixed-offset spatial crop; the uniform variant draws offsets from rng.
Latent crop_at(const Latent& x, std::int64_t y0, std::int64_t x0, std::int64_t crop_h,
               std::int64_t crop_w);
Latent random_crop(const Latent& x, std::int64_t crop_h, std::int64_t crop_w, Rng& rng);

// -------- update scheduling --------

enum class TturPhase { UpdateFake, UpdateGenerator };

// Repeating cycle: `ratio` fake-estimator updates, then one generator update.
TturPhase ttur_step(std::int64_t step, std::int64_t ratio = 5);

// -------- staged initialization data --------

struct OdePair {
    std::uint64_t seed = 0;
    DLatent z;                    // the run's initial noise
    HistoryContext history;       // teacher-forced conditioning
    std::vector<Latent> stage_x;  // terminal state per stage
};

// Runs the full many-step sampler once per seed and records the initial noise
// plus every stage terminal. When out_dir is nonempty, each tensor is written
// as an HLAT file and listed in out_dir/manifest.tsv (file, seed, stage, role).
std::vector<OdePair> generate_ode_pairs(const SectionModel& teacher,
                                        const std::function<HistoryContext(std::uint64_t)>& history_for,
                                        const PromptEmbedding& text, const StageSchedule& schedule,
                                        const std::vector<std::uint64_t>& seeds, double cfg_scale,
                                        std::int64_t section_frames, const std::string& out_dir);

// -------- parameter smoothing and reward weighting --------

// ema' = decay * ema + (1 - decay) * params, elementwise at 64 bit.
void ema_update(const DitParams& params, DitParams& ema, double decay);

// Multiplies a distillation loss by exp(reward / beta).
double reward_weighted_dmd(double dmd_loss, double reward, double beta);

// -------- orchestrated toy run --------

struct DistillRunConfig {
    DitConfig arch;             // generator and fake estimator architecture
    MemoryPlan plan;
    StageSchedule schedule;     // stage windows; steps field = teacher step counts
    std::vector<std::int64_t> student_steps = {1, 1, 1};
    DistillConfig distill;
    CorruptionPolicy policy = CorruptionPolicy::distill_defaults();
    // regression warmup runs at flow-training settings; the matching phase
    // swaps to its own, far gentler generator rate (momentum off, loose clip)
    AdamWConfig ode_opt;
    AdamWConfig gen_opt{2e-6, 0.0, 0.999, 1e-8, 1e-3, 10.0};
    AdamWConfig fake_opt{4e-7, 0.0, 0.999, 1e-8, 1e-3, 10.0};
    std::int64_t section_frames = 3;
    double teacher_cfg = 1.0;     // guidance for teacher rollouts
    std::int64_t ode_init_steps = 0;
    bool dmd_multiscale = false;  // also score coarse-stage estimates (ablation aid)

    void validate() const;
};

// Single-process distillation loop: generator and fake estimator start from the
// teacher weights, heads from scratch. Steps consume one clip each and follow
// the cycle: optional regression warmup on stored solution pairs, then the
// alternating fake/generator schedule. Generator updates never touch estimator
// parameters and vice versa.
class DistillRun {
  public:
    DistillRun(const DitParams& teacher, DistillRunConfig cfg, const PromptEmbedding& text,
               std::uint64_t seed);

    struct StepLog {
        std::int64_t step = 0;
        std::string phase;   // ode_init | fake | generator
        double loss = 0.0;   // regression / flow / distribution-matching magnitude
        double aux = 0.0;    // critic loss / adversarial generator loss
    };

    StepLog step(const Latent& clip);
    void add_ode_pairs(std::vector<OdePair> pairs);

    const DitParams& generator() const { return gen_; }
    const DitParams& fake_estimator() const { return fake_; }
    const DitParams& ema_params() const { return ema_; }
    const GanHeads& heads() const { return heads_; }
    const DistillRunConfig& config() const { return cfg_; }
    std::int64_t generator_updates() const { return gen_updates_; }
    std::int64_t fake_updates() const { return fake_updates_; }

    // Few-step rollout with arbitrary params under this run's schedule (no
    // gradients kept); the overload without params uses the current generator.
    DLatent student_rollout(const DitParams& params, const HistoryContext& history,
                            std::uint64_t seed) const;
    DLatent rollout(const HistoryContext& history, std::uint64_t seed) const;
    // Many-step teacher-style rollout with arbitrary params.
    DLatent reference_rollout(const DitParams& params, const HistoryContext& history,
                              std::uint64_t seed) const;

  private:
    StepLog ode_init_step(std::int64_t s);
    StepLog generator_step(std::int64_t s, const TeacherForcedSample& sample);
    StepLog fake_step(std::int64_t s, const TeacherForcedSample& sample);

    DistillRunConfig cfg_;
    DitParams teacher_, gen_, fake_, ema_;
    GanHeads heads_;
    PromptEmbedding text_;
    AdamW gen_adamw_, fake_adamw_, head_adamw_;
    std::vector<OdePair> pairs_;
    Rng rng_;
    std::int64_t step_counter_ = 0, ttur_counter_ = 0;
    std::int64_t gen_updates_ = 0, fake_updates_ = 0;
    bool matching_started_ = false;
};

// Mean squared difference between few-step generator endpoints and many-step
// teacher endpoints over shared noise and clean histories.
double endpoint_mse(const DistillRun& run, const DitParams& student, const DitParams& teacher,
                    const std::vector<Latent>& eval_clips, std::uint64_t seed);

}  // namespace latflow
