#include "latflow/context.hpp"

#include <cmath>
#include <string>

namespace latflow {

void MemoryPlan::validate() const {
    for (int i = 0; i < 3; i++) {
        const PatchKernel& k = kernels[static_cast<std::size_t>(i)];
        std::int64_t f = frames[static_cast<std::size_t>(i)];
        if (f <= 0 || k.t <= 0 || k.h <= 0 || k.w <= 0)
            throw ConfigError("memory plan term " + std::to_string(i) + " must be positive");
        if (f % k.t != 0)
            throw ConfigError("term " + std::to_string(i) + ": " + std::to_string(f) +
                              " frames not divisible by temporal kernel " + std::to_string(k.t));
        if (h % k.h != 0 || w % k.w != 0)
            throw ConfigError("term " + std::to_string(i) + ": spatial size " + std::to_string(h) + "x" +
                              std::to_string(w) + " not divisible by kernel " + std::to_string(k.h) + "x" +
                              std::to_string(k.w));
    }
}

TokenBudget token_budget(const MemoryPlan& plan) {
    plan.validate();
    TokenBudget out;
    out.total = Rat(0);
    for (int i = 0; i < 3; i++) {
        const PatchKernel& k = plan.kernels[static_cast<std::size_t>(i)];
        Rat tokens = Rat(plan.frames[static_cast<std::size_t>(i)], k.t) * Rat(plan.h, k.h) * Rat(plan.w, k.w);
        out.per_term[static_cast<std::size_t>(i)] = tokens;
        out.total = out.total + tokens;
    }
    return out;
}

namespace {

void check_frame(const Latent& f, const MemoryPlan& plan, std::int64_t b, std::int64_t c) {
    if (f.dims.t != 1) throw DimensionError("history stream frames must have T=1, got " + f.dims.str());
    if (f.dims.h != plan.h || f.dims.w != plan.w || f.dims.b != b || f.dims.c != c)
        throw DimensionError("history frame dims " + f.dims.str() + " do not match the plan");
}

}  // namespace

HistoryContext build_history(const std::vector<Latent>& stream_tail, const Latent* first_frame,
                             const MemoryPlan& plan) {
    plan.validate();
    const Latent* shape_src = first_frame ? first_frame : (stream_tail.empty() ? nullptr : &stream_tail.front());
    if (!shape_src) throw DimensionError("build_history needs at least one frame or an anchor");
    std::int64_t b = shape_src->dims.b, c = shape_src->dims.c;
    if (first_frame) check_frame(*first_frame, plan, b, c);
    for (const Latent& f : stream_tail) check_frame(f, plan, b, c);

    std::int64_t total = plan.total_frames();
    HistoryContext ctx;
    ctx.plan = plan;
    ctx.frames = Latent({b, c, total, plan.h, plan.w});
    ctx.zeroed.assign(static_cast<std::size_t>(total), 1);

    auto place = [&](std::int64_t slot, const Latent& f) {
        copy_frame(ctx.frames, slot, f, 0);
        ctx.zeroed[static_cast<std::size_t>(slot)] = 0;
    };

    // consume the stream newest-first: short term, then mid, then long
    std::int64_t idx = static_cast<std::int64_t>(stream_tail.size()) - 1;
    for (std::int64_t s = total - 1; s >= plan.short_begin() && idx >= 0; s--)
        place(s, stream_tail[static_cast<std::size_t>(idx--)]);
    for (std::int64_t s = plan.short_begin() - 1; s >= plan.mid_begin() && idx >= 0; s--)
        place(s, stream_tail[static_cast<std::size_t>(idx--)]);
    std::int64_t long_lo = first_frame ? 1 : 0;
    for (std::int64_t s = plan.mid_begin() - 1; s >= long_lo && idx >= 0; s--)
        place(s, stream_tail[static_cast<std::size_t>(idx--)]);
    if (first_frame) {
        place(0, *first_frame);
        ctx.anchor_present = true;
    }
    return ctx;
}

HistoryContext t2v_history(const MemoryPlan& plan, std::int64_t b, std::int64_t c) {
    plan.validate();
    HistoryContext ctx;
    ctx.plan = plan;
    ctx.frames = Latent({b, c, plan.total_frames(), plan.h, plan.w});
    ctx.zeroed.assign(static_cast<std::size_t>(plan.total_frames()), 1);
    return ctx;
}

HistoryContext i2v_history(const Latent& image, const MemoryPlan& plan) {
    HistoryContext ctx = t2v_history(plan, image.dims.b, image.dims.c);
    check_frame(image, plan, image.dims.b, image.dims.c);
    copy_frame(ctx.frames, plan.total_frames() - 1, image, 0);
    ctx.zeroed.back() = 0;
    return ctx;
}

void HistoryBuffer::push(const Latent& frame) {
    check_frame(frame, plan_, frame.dims.b, frame.dims.c);
    if (!anchor_) anchor_ = frame;
    recent_.push_back(frame);
    std::size_t cap = static_cast<std::size_t>(plan_.total_frames());
    while (recent_.size() > cap) recent_.pop_front();
    total_++;
}

HistoryContext HistoryBuffer::assemble() const {
    if (!anchor_) throw DimensionError("empty history buffer");
    std::vector<Latent> tail(recent_.begin(), recent_.end());
    return build_history(tail, &*anchor_, plan_);
}

std::size_t HistoryBuffer::window_bytes() const {
    std::size_t per = anchor_ ? anchor_->data.size() * sizeof(float) : 0;
    return per * static_cast<std::size_t>(plan_.total_frames() + 1);
}

const char* task_mode_name(TaskMode m) {
    switch (m) {
        case TaskMode::T2V: return "t2v";
        case TaskMode::I2V: return "i2v";
        default: return "v2v";
    }
}

TaskMode task_mode(const HistoryContext& ctx) {
    std::int64_t total = ctx.frames.dims.t;
    bool last_nonzero = !frame_is_zero(ctx.frames, total - 1);
    bool rest_zero = true;
    for (std::int64_t t = 0; t < total - 1 && rest_zero; t++) rest_zero = frame_is_zero(ctx.frames, t);
    if (rest_zero && !last_nonzero) return TaskMode::T2V;
    if (rest_zero && last_nonzero) return TaskMode::I2V;
    return TaskMode::V2V;
}

void TaskModeDist::validate() const {
    if (t2v < 0 || i2v < 0 || v2v < 0 || std::abs(t2v + i2v + v2v - 1.0) > 1e-9)
        throw ConfigError("task mode weights must be nonnegative and sum to 1");
}

TaskMode zero_out_history(HistoryContext& ctx, const TaskModeDist& dist, Rng& rng) {
    dist.validate();
    double u = rng.uniform();
    std::int64_t total = ctx.frames.dims.t;
    if (u < dist.t2v) {
        for (std::int64_t t = 0; t < total; t++) {
            zero_frame(ctx.frames, t);
            ctx.zeroed[static_cast<std::size_t>(t)] = 1;
        }
        ctx.anchor_present = false;
        return TaskMode::T2V;
    }
    if (u < dist.t2v + dist.i2v) {
        for (std::int64_t t = 0; t < total - 1; t++) {
            zero_frame(ctx.frames, t);
            ctx.zeroed[static_cast<std::size_t>(t)] = 1;
        }
        ctx.anchor_present = false;
        return TaskMode::I2V;
    }
    return TaskMode::V2V;
}

RopePlan rope_indices(const MemoryPlan& plan, std::int64_t t_noisy, RopeIndexing mode, std::int64_t noisy_patch_t) {
    plan.validate();
    if (t_noisy <= 0 || noisy_patch_t <= 0 || t_noisy % noisy_patch_t != 0)
        throw ConfigError("noisy frame count must be a positive multiple of its temporal kernel");
    RopePlan out;
    if (mode == RopeIndexing::PostPatch) {
        std::int64_t pos = 0;
        for (int term : {2, 1, 0}) {  // tensor order: long, mid, short
            std::int64_t n = plan.frames[static_cast<std::size_t>(term)] / plan.kernels[static_cast<std::size_t>(term)].t;
            for (std::int64_t i = 0; i < n; i++) out.hist_pos.push_back(pos++);
        }
        for (std::int64_t i = 0; i < t_noisy / noisy_patch_t; i++) out.noisy_pos.push_back(pos++);
    } else {
        std::int64_t frame0 = 0;
        for (int term : {2, 1, 0}) {
            std::int64_t f = plan.frames[static_cast<std::size_t>(term)];
            std::int64_t pt = plan.kernels[static_cast<std::size_t>(term)].t;
            for (std::int64_t i = 0; i < f / pt; i++) out.hist_pos.push_back(frame0 + i * pt);
            frame0 += f;
        }
        for (std::int64_t i = 0; i < t_noisy / noisy_patch_t; i++) out.noisy_pos.push_back(frame0 + i * noisy_patch_t);
    }
    return out;
}

PromptEmbedding interpolate_prompts(const PromptEmbedding& a, const PromptEmbedding& b, double alpha) {
    if (!a.same_shape(b)) throw DimensionError("prompt embeddings must share a shape");
    PromptEmbedding out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.a.size(); i++) out.a[i] = (1.0 - alpha) * a.a[i] + alpha * b.a[i];
    return out;
}

}  // namespace latflow
