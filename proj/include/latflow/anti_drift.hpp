#pragma once

#include <cstdint>
#include <vector>

#include "latflow/context.hpp"
#include "latflow/latent.hpp"
#include "latflow/rng.hpp"

namespace latflow {

// Frame-aware history corruption: every eligible frame independently receives
// exactly one perturbation. Branch probabilities and per-mechanism parameter
// ranges are stored separately so a mechanism keeps its range even when its
// probability is zero.
struct CorruptionPolicy {
    double p_noise = 0.0;     // additive Gaussian noise
    double p_downup = 0.0;    // area downsample, nearest-neighbor back up
    double p_exposure = 0.0;  // multiplicative gain
    double p_clean = 1.0;

    double gain_min = 0.3, gain_max = 1.7;    // exposure gain, 1 = identity
    double noise_min = 0.0, noise_max = 0.33; // noise sigma, 0 = identity
    double frac_min = 0.0, frac_max = 0.1;    // resolution cut fraction, 0 = identity

    void validate() const;

    // Mix used while training the base flow model.
    static CorruptionPolicy base_defaults();
    // Harsher mix used during distillation.
    static CorruptionPolicy distill_defaults();
};

enum class CorruptKind { Noise, DownUp, Exposure, Clean };

// One branch decision (one uniform draw); exposed so choice frequencies can be
// audited against the policy probabilities.
CorruptKind draw_corruption(const CorruptionPolicy& policy, Rng& rng);

// Corrupts every eligible frame of the history. The anchor slot and zero-filled
// slots pass through untouched: zeros stay zero so task detection keeps working
// and the global anchor stays trustworthy. Deterministic for a given seed.
HistoryContext corrupt_history(const HistoryContext& history, const CorruptionPolicy& policy,
                               Rng& rng);

// Running per-channel statistics of generated sections, smoothed by EMA.
// Holds the trigger thresholds so detector state travels as one value.
struct DriftTracker {
    std::vector<double> mean_ema;
    std::vector<double> var_ema;
    double rho_mean = 0.9;
    double rho_var = 0.9;
    double delta_mean = 0.1;
    double delta_var = 0.1;
    std::int64_t sections = 0;

    void validate() const;
};

// Folds one section into the tracker. The first section initializes both EMAs
// to the section's values; later ones apply ema' = rho*ema + (1-rho)*value per
// channel.
void update_tracker(DriftTracker& tracker, const ChannelStats& stats);

// Call after update_tracker with the same stats; the deviation is measured
// against the EMA that already includes the current section. True only when
// both statistics deviate: ||mean - mean_ema||_2 > delta_mean AND
// ||var - var_ema||_2 > delta_var.
bool drift_triggered(const DriftTracker& tracker, const ChannelStats& stats);

// Targeted variant for inference: when flagged, only the newest tail_frames
// slots (the ones the offending section filled) are eligible for corruption;
// otherwise the history passes through bit-identical.
HistoryContext adaptive_corrupt(const HistoryContext& history, bool flagged,
                                const CorruptionPolicy& policy, std::int64_t tail_frames,
                                Rng& rng);

}  // namespace latflow
