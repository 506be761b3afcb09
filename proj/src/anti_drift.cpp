#include "latflow/anti_drift.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "latflow/errors.hpp"

namespace latflow {

void CorruptionPolicy::validate() const {
    const double ps[4] = {p_noise, p_downup, p_exposure, p_clean};
    double sum = 0.0;
    for (double p : ps) {
        if (p < 0.0 || p > 1.0) throw ConfigError("corruption probabilities must lie in [0, 1]");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("corruption probabilities must sum to 1");
    if (gain_min > gain_max || noise_min > noise_max || frac_min > frac_max)
        throw ConfigError("corruption ranges must be ordered");
    if (noise_min < 0.0) throw ConfigError("noise level must be nonnegative");
    if (frac_min < 0.0 || frac_max >= 1.0)
        throw ConfigError("resolution cut fraction must lie in [0, 1)");
}

CorruptionPolicy CorruptionPolicy::base_defaults() {
    CorruptionPolicy p;
    p.p_noise = 0.0;
    p.p_downup = 0.8;
    p.p_exposure = 0.1;
    p.p_clean = 0.1;
    return p;
}

CorruptionPolicy CorruptionPolicy::distill_defaults() {
    CorruptionPolicy p;
    p.p_noise = 0.4;
    p.p_downup = 0.4;
    p.p_exposure = 0.0;
    p.p_clean = 0.2;
    return p;
}

CorruptKind draw_corruption(const CorruptionPolicy& policy, Rng& rng) {
    const double u = rng.uniform();
    if (u < policy.p_noise) return CorruptKind::Noise;
    if (u < policy.p_noise + policy.p_downup) return CorruptKind::DownUp;
    if (u < policy.p_noise + policy.p_downup + policy.p_exposure) return CorruptKind::Exposure;
    return CorruptKind::Clean;
}

namespace {

// Per frame the stream is consumed as: one branch uniform, then the branch's
// parameter uniform, then (noise only) one normal per element.
void corrupt_frame(Latent& frames, std::int64_t t, CorruptKind kind, const CorruptionPolicy& pol,
                   Rng& rng) {
    const LatentDims d = frames.dims;
    switch (kind) {
        case CorruptKind::Clean:
            return;
        case CorruptKind::Exposure: {
            const float a = static_cast<float>(rng.uniform(pol.gain_min, pol.gain_max));
            for (std::int64_t b = 0; b < d.b; b++)
                for (std::int64_t c = 0; c < d.c; c++)
                    for (std::int64_t y = 0; y < d.h; y++)
                        for (std::int64_t x = 0; x < d.w; x++) frames.at(b, c, t, y, x) *= a;
            return;
        }
        case CorruptKind::Noise: {
            const float s = static_cast<float>(rng.uniform(pol.noise_min, pol.noise_max));
            for (std::int64_t b = 0; b < d.b; b++)
                for (std::int64_t c = 0; c < d.c; c++)
                    for (std::int64_t y = 0; y < d.h; y++)
                        for (std::int64_t x = 0; x < d.w; x++)
                            frames.at(b, c, t, y, x) += s * static_cast<float>(rng.normal());
            return;
        }
        case CorruptKind::DownUp: {
            const double f = rng.uniform(pol.frac_min, pol.frac_max);
            const std::int64_t nh = std::max<std::int64_t>(1, std::llround(d.h * (1.0 - f)));
            const std::int64_t nw = std::max<std::int64_t>(1, std::llround(d.w * (1.0 - f)));
            if (nh == d.h && nw == d.w) return;
            Latent one({d.b, d.c, 1, d.h, d.w});
            copy_frame(one, 0, frames, t);
            Latent back = resample_nearest_to(resample_area_to(one, nh, nw), d.h, d.w);
            copy_frame(frames, t, back, 0);
            return;
        }
    }
}

void corrupt_slots(HistoryContext& ctx, const CorruptionPolicy& policy, Rng& rng,
                   std::int64_t t_begin, std::int64_t t_end) {
    for (std::int64_t t = t_begin; t < t_end; t++) {
        if (ctx.anchor_present && t == 0) continue;
        if (!ctx.zeroed.empty() && ctx.zeroed[static_cast<std::size_t>(t)]) continue;
        corrupt_frame(ctx.frames, t, draw_corruption(policy, rng), policy, rng);
    }
}

double l2_deviation(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); i++) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace

HistoryContext corrupt_history(const HistoryContext& history, const CorruptionPolicy& policy,
                               Rng& rng) {
    policy.validate();
    HistoryContext out = history;
    corrupt_slots(out, policy, rng, 0, out.frames.dims.t);
    return out;
}

void DriftTracker::validate() const {
    if (!(rho_mean > 0.0 && rho_mean < 1.0) || !(rho_var > 0.0 && rho_var < 1.0))
        throw ConfigError("EMA smoothing factors must lie in (0, 1)");
    if (!(delta_mean > 0.0) || !(delta_var > 0.0))
        throw ConfigError("drift thresholds must be positive");
}

void update_tracker(DriftTracker& tracker, const ChannelStats& stats) {
    tracker.validate();
    if (stats.mean.size() != stats.var.size())
        throw DimensionError("channel stats mean/var sizes disagree");
    if (tracker.sections == 0) {
        tracker.mean_ema = stats.mean;
        tracker.var_ema = stats.var;
    } else {
        if (tracker.mean_ema.size() != stats.mean.size())
            throw DimensionError("channel count changed between sections");
        for (std::size_t c = 0; c < stats.mean.size(); c++) {
            tracker.mean_ema[c] =
                tracker.rho_mean * tracker.mean_ema[c] + (1.0 - tracker.rho_mean) * stats.mean[c];
            tracker.var_ema[c] =
                tracker.rho_var * tracker.var_ema[c] + (1.0 - tracker.rho_var) * stats.var[c];
        }
    }
    tracker.sections++;
}

bool drift_triggered(const DriftTracker& tracker, const ChannelStats& stats) {
    if (stats.mean.size() != tracker.mean_ema.size() ||
        stats.var.size() != tracker.var_ema.size())
        throw DimensionError("tracker and stats channel counts disagree");
    return l2_deviation(stats.mean, tracker.mean_ema) > tracker.delta_mean &&
           l2_deviation(stats.var, tracker.var_ema) > tracker.delta_var;
}

HistoryContext adaptive_corrupt(const HistoryContext& history, bool flagged,
                                const CorruptionPolicy& policy, std::int64_t tail_frames,
                                Rng& rng) {
    if (!flagged) return history;
    policy.validate();
    if (tail_frames < 0) throw DimensionError("tail_frames must be nonnegative");
    HistoryContext out = history;
    const std::int64_t total = out.frames.dims.t;
    corrupt_slots(out, policy, rng, std::max<std::int64_t>(0, total - tail_frames), total);
    return out;
}

}  // namespace latflow
