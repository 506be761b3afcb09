#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "latflow/dmat.hpp"
#include "latflow/latent.hpp"
#include "latflow/rational.hpp"
#include "latflow/rng.hpp"

namespace latflow {

struct PatchKernel {
    std::int64_t t = 1, h = 1, w = 1;
    std::int64_t volume() const { return t * h * w; }
};

// Tiered history compression plan. Term 0 is the short-term store (most recent
// frames, finest kernel), term 2 the long-term store (coarsest kernel). The
// assembled history tensor is laid out oldest term first: [long | mid | short],
// oldest to newest inside each term, so the newest frame is the last slot.
struct MemoryPlan {
    std::array<std::int64_t, 3> frames = {2, 2, 16};
    std::array<PatchKernel, 3> kernels = {{{1, 2, 2}, {2, 4, 4}, {4, 8, 8}}};
    std::int64_t h = 48, w = 80;

    std::int64_t total_frames() const { return frames[0] + frames[1] + frames[2]; }

    // slot ranges in the assembled tensor
    std::int64_t long_begin() const { return 0; }
    std::int64_t mid_begin() const { return frames[2]; }
    std::int64_t short_begin() const { return frames[2] + frames[1]; }

    void validate() const;
};

struct TokenBudget {
    std::array<Rat, 3> per_term;  // short, mid, long
    Rat total;
};

// Tokens contributed by each term: (T_i / p_t) * (H / p_h) * (W / p_w).
// Exact rationals; independent of how much video has been generated.
TokenBudget token_budget(const MemoryPlan& plan);

struct HistoryContext {
    Latent frames;  // (B, C, total_frames, H, W)
    MemoryPlan plan;
    bool anchor_present = false;
    std::vector<std::uint8_t> zeroed;  // per slot, 1 = zero-filled by assembly or task simulation
};

// Assemble the tiered history from the tail of a frame stream (each element a
// single-frame latent, oldest first). The newest frames fill the short term,
// the next ones the mid term, older ones the long term; `first_frame`, when
// given, always takes long-term slot 0 and displaces the oldest slot. Streams
// shorter than the window fill tail-aligned and zero-pad the remaining slots;
// a very young stream may therefore show the same frame both as the anchor and
// in a recency slot.
HistoryContext build_history(const std::vector<Latent>& stream_tail, const Latent* first_frame,
                             const MemoryPlan& plan);

// All-zero history (text-to-video start).
HistoryContext t2v_history(const MemoryPlan& plan, std::int64_t b, std::int64_t c);

// Zero history with the conditioning image in the final slot (image-to-video start).
HistoryContext i2v_history(const Latent& image, const MemoryPlan& plan);

// Bounded rolling store for a generation loop: anchor plus the last
// total_frames()-1 frames. Memory use is independent of how long the loop runs.
class HistoryBuffer {
  public:
    explicit HistoryBuffer(MemoryPlan plan) : plan_(plan) { plan_.validate(); }

    void push(const Latent& frame);
    HistoryContext assemble() const;
    std::int64_t total_seen() const { return total_; }
    std::size_t window_bytes() const;

  private:
    MemoryPlan plan_;
    std::optional<Latent> anchor_;
    std::deque<Latent> recent_;
    std::int64_t total_ = 0;
};

enum class TaskMode { T2V, I2V, V2V };

const char* task_mode_name(TaskMode m);

// Decided purely by the supplied frames: all zero -> T2V; exactly the final
// slot nonzero -> I2V; anything else -> V2V.
TaskMode task_mode(const HistoryContext& ctx);

struct TaskModeDist {
    double t2v = 0.3, i2v = 0.3, v2v = 0.4;
    void validate() const;
};

// Training-time task simulation: draws a mode and zeroes frames accordingly
// (everything for T2V, all but the final slot for I2V, nothing for V2V).
TaskMode zero_out_history(HistoryContext& ctx, const TaskModeDist& dist, Rng& rng);

enum class RopeIndexing { PostPatch, PrePatch };

struct RopePlan {
    std::vector<std::int64_t> hist_pos;   // one per temporal token, [long | mid | short] order
    std::vector<std::int64_t> noisy_pos;  // continue after the history positions
};

// Temporal rotary positions. PostPatch numbers patched positions consecutively;
// PrePatch keeps frame units and anchors each temporal patch at its first frame.
RopePlan rope_indices(const MemoryPlan& plan, std::int64_t t_noisy, RopeIndexing mode = RopeIndexing::PostPatch,
                      std::int64_t noisy_patch_t = 1);

using PromptEmbedding = DMat;  // l_text x d_text

PromptEmbedding interpolate_prompts(const PromptEmbedding& a, const PromptEmbedding& b, double alpha);

}  // namespace latflow
