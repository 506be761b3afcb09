#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "latflow/anti_drift.hpp"
#include "latflow/bench.hpp"
#include "latflow/context.hpp"
#include "latflow/distill.hpp"
#include "latflow/optim.hpp"
#include "latflow/pyramid_flow.hpp"
#include "latflow/pyramid_sampler.hpp"
#include "latflow/toy_dit.hpp"

namespace latflow {

// -------- configuration --------

// Parsed key=value text with [section] headers. Raw strings only; typing and
// defaulting happen in run_config_from, which rejects unknown sections and keys
// so a typo cannot silently fall back to a default.
using ConfigMap = std::map<std::string, std::map<std::string, std::string>>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap parse_config_file(const std::string& path);

// Flag-override hook: "section.key" dotted form.
void set_config_value(ConfigMap& m, const std::string& dotted_key, const std::string& value);

// One prompt-schedule entry: from `section` on, move to the embedding named by
// `source` over `interp_m` sections. Sources: "seed:<u64>" draws a synthetic
// embedding, "file:<path>" loads a (1,1,1,l_text,d_text) latent container.
struct PromptEvent {
    std::int64_t section = 0;
    std::string source;
    std::int64_t interp_m = 1;
};

// Synthetic moving-blob dataset shape. Every blob keeps its velocity, size and
// per-channel color for the whole clip; centers move on a torus.
struct BlobConfig {
    std::int64_t clips = 8;
    std::int64_t frames = 24;
    std::int64_t blobs = 2;
    double sigma_min = 0.8, sigma_max = 1.6;
    double color_max = 1.0;
    double vel_max = 1.5;

    void validate() const;
};

// Everything a command needs, with published defaults. The schedule is stored
// as its generating knobs so one stage count (arch.k_stages) stays the single
// source of truth.
struct RunConfig {
    // [run]
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::int64_t sections = 1;
    std::int64_t section_frames = 3;
    double cfg_scale = 1.0;
    std::string checkpoint;
    std::string dataset;     // dataset manifest written by the synth command
    std::string init_image;  // single-frame container, image-to-video start
    std::string init_clip;   // multi-frame container, video continuation start

    // [arch] and [plan]; the explicit flags record whether the config text set
    // any key, which arms the checkpoint mismatch check
    DitConfig arch;
    MemoryPlan plan;
    bool arch_explicit = false;
    bool plan_explicit = false;

    // [schedule]
    std::int64_t total_steps = 50;
    double base_shift = 3.0;
    double t_max = 1000.0;
    std::vector<std::int64_t> steps_override;  // per-stage counts, empty = even split

    // [corrupt] and [tasks]; an explicit [corrupt] section overrides the
    // per-stage presets everywhere, including distillation
    CorruptionPolicy corrupt = CorruptionPolicy::base_defaults();
    bool corrupt_explicit = false;
    TaskModeDist task_dist;

    // [drift]
    DriftTracker drift;  // threshold fields only; stats start empty
    bool drift_enabled = true;

    // [train] and [train_opt]
    std::int64_t train_steps = 500;
    std::int64_t train_stage = 2;
    AdamWConfig train_opt{1e-4, 0.9, 0.999, 1e-8, 1e-4, 1.0};
    double ema_decay = 0.99;
    std::int64_t ckpt_every = 0;  // extra checkpoints every N steps, 0 = final only

    // [distill] plus [gen_opt]/[fake_opt]/[ode_opt]; arch, plan, schedule and
    // section_frames are copied in when the command builds the run
    DistillRunConfig distill;
    std::int64_t distill_steps = 500;
    std::int64_t ode_pairs = 8;

    // [prompts]
    std::int64_t l_text = 8;
    std::vector<PromptEvent> prompts;  // strictly increasing sections

    // [synth]
    BlobConfig synth;

    // [cost]
    CostModel cost;  // layers and d_model track arch unless set explicitly
    std::int64_t cost_time_sections = 0;  // timed sampler sections, 0 = skip timing

    StageSchedule schedule() const;
    void validate() const;
};

RunConfig run_config_from(const ConfigMap& m);

// -------- prompt embeddings --------

// Seeded standard-normal l x d matrix; the stand-in for a text encoder.
PromptEmbedding synthetic_prompt(std::int64_t l, std::int64_t d, std::uint64_t seed);

// "seed:<u64>" or "file:<path>"; file payload must be (1,1,1,l,d).
PromptEmbedding resolve_prompt_source(const std::string& source, std::int64_t l, std::int64_t d);

void write_prompt(const std::string& path, const PromptEmbedding& e);

// Per-section embeddings for a whole run. Sections before the first event use
// the default prompt "seed:<base_seed>". An event at section s with window M
// blends from the embedding the previous section used to the event's target
// over sections s..s+M-1 (reaching the target exactly at the window end); a
// later event cancels any unfinished blend.
std::vector<PromptEmbedding> unroll_prompt_schedule(const std::vector<PromptEvent>& events,
                                                    std::int64_t sections, std::int64_t l, std::int64_t d,
                                                    std::uint64_t base_seed);

// -------- synthetic clips --------

// Per-clip blob parameters, one row per blob where applicable.
struct BlobInfo {
    std::vector<double> y0, x0;    // start centers
    std::vector<double> vy, vx;    // per-frame velocity
    std::vector<double> sigma;
    DMat color;                    // blobs x channels
};

// Sum of periodic Gaussians: cell (y,x) accumulates color[j][c] weighted by
// the toroidal squared distance to center j.
Latent blob_frame(LatentDims frame_dims, const std::vector<double>& cy, const std::vector<double>& cx,
                  const std::vector<double>& sigma, const DMat& color);

// One seeded clip; frame t places blob j at (y0 + t*vy, x0 + t*vx) wrapped.
Latent synth_clip(const BlobConfig& cfg, std::int64_t channels, std::int64_t h, std::int64_t w,
                  std::uint64_t seed, BlobInfo* info = nullptr);

// -------- commands --------
// All commands throw on failure; the binary front end maps error kinds to exit
// codes (config 2, io 3, numeric 4).

struct GenerateResult {
    std::vector<std::string> files;  // one latent container per section
    std::string manifest_path;
    TaskMode mode = TaskMode::T2V;
    std::int64_t hist_tokens_per_section = 0;
    std::size_t peak_window_bytes = 0;
};

GenerateResult cmd_generate(const RunConfig& cfg);

struct TrainResult {
    std::string log_path;
    std::string ckpt_path;
    std::string ema_path;
    std::int64_t steps = 0;
};

TrainResult cmd_train(const RunConfig& cfg);

struct DistillResult {
    std::string log_path;
    std::string gen_path;
    std::string ema_path;
    std::int64_t generator_updates = 0;
    std::int64_t fake_updates = 0;
};

DistillResult cmd_distill(const RunConfig& cfg);

struct SynthResult {
    std::vector<std::string> files;
    std::string manifest_path;
};

SynthResult cmd_synth(const RunConfig& cfg);

// Scores every file and returns the rendered report; when out_dir is nonempty
// the row-per-video table is also written to <out_dir>/report.tsv.
std::string cmd_score(const std::vector<std::string>& paths, const std::string& out_dir = "");

// Analytical token/FLOP report; when cost_time_sections > 0 a freshly
// initialized model at the configured scale samples that many sections and the
// measured wall-clock per-section latency and frames-per-second are appended
// (the only nondeterministic output any command produces).
std::string cmd_cost(const RunConfig& cfg);

}  // namespace latflow
