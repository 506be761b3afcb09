#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "latflow/anti_drift.hpp"
#include "latflow/errors.hpp"

using namespace latflow;

namespace {

MemoryPlan tiny_plan() {
    MemoryPlan plan;
    plan.frames = {3, 1, 2};
    plan.kernels = {{{1, 2, 2}, {1, 2, 2}, {1, 2, 2}}};
    plan.h = 8;
    plan.w = 8;
    return plan;
}

// Fully populated history built directly, no zero slots, no anchor.
HistoryContext full_history(std::uint64_t seed, std::int64_t h = 8, std::int64_t w = 8) {
    HistoryContext ctx;
    ctx.plan = tiny_plan();
    ctx.plan.h = h;
    ctx.plan.w = w;
    ctx.frames = seeded_gaussian({1, 2, ctx.plan.total_frames(), h, w}, seed);
    ctx.anchor_present = false;
    ctx.zeroed.assign(static_cast<std::size_t>(ctx.plan.total_frames()), 0);
    return ctx;
}

CorruptionPolicy only(CorruptKind kind) {
    CorruptionPolicy p;
    p.p_noise = p.p_downup = p.p_exposure = p.p_clean = 0.0;
    switch (kind) {
        case CorruptKind::Noise: p.p_noise = 1.0; break;
        case CorruptKind::DownUp: p.p_downup = 1.0; break;
        case CorruptKind::Exposure: p.p_exposure = 1.0; break;
        case CorruptKind::Clean: p.p_clean = 1.0; break;
    }
    return p;
}

bool frame_differs(const Latent& a, const Latent& b, std::int64_t t) {
    const LatentDims d = a.dims;
    for (std::int64_t bi = 0; bi < d.b; bi++)
        for (std::int64_t c = 0; c < d.c; c++)
            for (std::int64_t y = 0; y < d.h; y++)
                for (std::int64_t x = 0; x < d.w; x++)
                    if (a.at(bi, c, t, y, x) != b.at(bi, c, t, y, x)) return true;
    return false;
}

ChannelStats stats1(double mean, double var) {
    ChannelStats s;
    s.mean = {mean};
    s.var = {var};
    return s;
}

}  // namespace

TEST_SUITE_BEGIN("anti_drift");

TEST_CASE("policy validation accepts the defaults and rejects broken policies") {
    CHECK_NOTHROW(CorruptionPolicy::base_defaults().validate());
    CHECK_NOTHROW(CorruptionPolicy::distill_defaults().validate());
    CHECK(CorruptionPolicy{}.p_clean == 1.0);
    CHECK_NOTHROW(CorruptionPolicy{}.validate());

    CorruptionPolicy bad = CorruptionPolicy::base_defaults();
    bad.p_clean = 0.2;  // sum 1.1
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = CorruptionPolicy::base_defaults();
    bad.p_noise = -0.1;
    bad.p_clean = 0.2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = CorruptionPolicy::base_defaults();
    bad.gain_min = 2.0;  // above gain_max
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = CorruptionPolicy::base_defaults();
    bad.frac_max = 1.0;  // would shrink frames to nothing
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = CorruptionPolicy::base_defaults();
    bad.noise_min = -0.5;
    bad.noise_max = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("default policies carry the published mixes") {
    CorruptionPolicy s1 = CorruptionPolicy::base_defaults();
    CHECK(s1.p_noise == 0.0);
    CHECK(s1.p_downup == 0.8);
    CHECK(s1.p_exposure == 0.1);
    CHECK(s1.p_clean == 0.1);
    CHECK(s1.noise_max == 0.33);
    CHECK(s1.frac_max == 0.1);

    CorruptionPolicy s3 = CorruptionPolicy::distill_defaults();
    CHECK(s3.p_noise == 0.4);
    CHECK(s3.p_downup == 0.4);
    CHECK(s3.p_exposure == 0.0);
    CHECK(s3.p_clean == 0.2);
    CHECK(s3.gain_min == 0.3);
    CHECK(s3.gain_max == 1.7);
}

TEST_CASE("clean-only policy is the identity on every frame") {
    HistoryContext ctx = full_history(11);
    Rng rng(5);
    HistoryContext out = corrupt_history(ctx, only(CorruptKind::Clean), rng);
    CHECK(out.frames.data == ctx.frames.data);
    CHECK(out.zeroed == ctx.zeroed);
}

TEST_CASE("degenerate parameter ranges are identities") {
    HistoryContext ctx = full_history(12);

    CorruptionPolicy exposure = only(CorruptKind::Exposure);
    exposure.gain_min = exposure.gain_max = 1.0;
    Rng r1(7);
    CHECK(corrupt_history(ctx, exposure, r1).frames.data == ctx.frames.data);

    CorruptionPolicy noise = only(CorruptKind::Noise);
    noise.noise_min = noise.noise_max = 0.0;
    Rng r2(7);
    CHECK(corrupt_history(ctx, noise, r2).frames.data == ctx.frames.data);

    CorruptionPolicy downup = only(CorruptKind::DownUp);
    downup.frac_min = downup.frac_max = 0.0;
    Rng r3(7);
    CHECK(corrupt_history(ctx, downup, r3).frames.data == ctx.frames.data);
}

TEST_CASE("branch frequencies match the policy probabilities at 1e4 draws") {
    const int n = 10000;
    auto frequencies = [&](const CorruptionPolicy& pol, std::uint64_t seed) {
        Rng rng(seed);
        std::array<int, 4> counts = {0, 0, 0, 0};
        for (int i = 0; i < n; i++) counts[static_cast<std::size_t>(draw_corruption(pol, rng))]++;
        return counts;
    };

    std::array<int, 4> c1 = frequencies(CorruptionPolicy::base_defaults(), 321);
    CHECK(c1[static_cast<std::size_t>(CorruptKind::Noise)] == 0);
    CHECK(std::abs(c1[static_cast<std::size_t>(CorruptKind::DownUp)] / double(n) - 0.8) <= 0.02);
    CHECK(std::abs(c1[static_cast<std::size_t>(CorruptKind::Exposure)] / double(n) - 0.1) <= 0.02);
    CHECK(std::abs(c1[static_cast<std::size_t>(CorruptKind::Clean)] / double(n) - 0.1) <= 0.02);

    std::array<int, 4> c3 = frequencies(CorruptionPolicy::distill_defaults(), 322);
    CHECK(std::abs(c3[static_cast<std::size_t>(CorruptKind::Noise)] / double(n) - 0.4) <= 0.02);
    CHECK(std::abs(c3[static_cast<std::size_t>(CorruptKind::DownUp)] / double(n) - 0.4) <= 0.02);
    CHECK(c3[static_cast<std::size_t>(CorruptKind::Exposure)] == 0);
    CHECK(std::abs(c3[static_cast<std::size_t>(CorruptKind::Clean)] / double(n) - 0.2) <= 0.02);
}

TEST_CASE("exposure branch is a single multiplicative gain") {
    HistoryContext ctx = full_history(13);
    CorruptionPolicy pol = only(CorruptKind::Exposure);
    pol.gain_min = pol.gain_max = 1.5;
    Rng rng(9);
    HistoryContext out = corrupt_history(ctx, pol, rng);
    for (std::size_t i = 0; i < ctx.frames.data.size(); i++)
        CHECK(out.frames.data[i] == ctx.frames.data[i] * 1.5f);
}

TEST_CASE("noise branch reproduces the documented draw order") {
    HistoryContext ctx;
    ctx.plan = tiny_plan();
    ctx.frames = seeded_gaussian({1, 2, 1, 8, 8}, 14);
    ctx.anchor_present = false;
    ctx.zeroed.assign(1, 0);

    CorruptionPolicy pol = only(CorruptKind::Noise);
    pol.noise_min = pol.noise_max = 0.2;
    Rng rng(41);
    HistoryContext out = corrupt_history(ctx, pol, rng);

    Rng replay(41);
    (void)replay.uniform();                                        // branch
    const float s = static_cast<float>(replay.uniform(0.2, 0.2));  // level
    const LatentDims d = ctx.frames.dims;
    for (std::int64_t b = 0; b < d.b; b++)
        for (std::int64_t c = 0; c < d.c; c++)
            for (std::int64_t y = 0; y < d.h; y++)
                for (std::int64_t x = 0; x < d.w; x++) {
                    const float expect =
                        ctx.frames.at(b, c, 0, y, x) + s * static_cast<float>(replay.normal());
                    CHECK(out.frames.at(b, c, 0, y, x) == expect);
                }
}

TEST_CASE("noise branch has the drawn scale statistically") {
    HistoryContext ctx;
    ctx.plan = tiny_plan();
    ctx.plan.h = ctx.plan.w = 32;
    ctx.frames = seeded_gaussian({1, 2, 1, 32, 32}, 15);
    ctx.anchor_present = false;
    ctx.zeroed.assign(1, 0);

    CorruptionPolicy pol = only(CorruptKind::Noise);
    pol.noise_min = pol.noise_max = 0.3;
    Rng rng(77);
    HistoryContext out = corrupt_history(ctx, pol, rng);

    double sum = 0.0, sumsq = 0.0;
    const double n = static_cast<double>(ctx.frames.data.size());
    for (std::size_t i = 0; i < ctx.frames.data.size(); i++) {
        const double diff = double(out.frames.data[i]) - double(ctx.frames.data[i]);
        sum += diff;
        sumsq += diff * diff;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) <= 4.0 * 0.3 / std::sqrt(n));
    CHECK(var == doctest::Approx(0.09).epsilon(0.15));
}

TEST_CASE("down-up branch equals area resample then nearest resample") {
    HistoryContext ctx;
    ctx.plan = tiny_plan();
    ctx.frames = seeded_gaussian({1, 2, 1, 8, 8}, 16);
    ctx.anchor_present = false;
    ctx.zeroed.assign(1, 0);

    CorruptionPolicy pol = only(CorruptKind::DownUp);
    pol.frac_min = pol.frac_max = 0.25;
    Rng rng(23);
    HistoryContext out = corrupt_history(ctx, pol, rng);

    // 8 * (1 - 0.25) = 6 in both axes.
    Latent expect = resample_nearest_to(resample_area_to(ctx.frames, 6, 6), 8, 8);
    CHECK(out.frames.data == expect.data);
    CHECK(frame_differs(out.frames, ctx.frames, 0));
}

TEST_CASE("corruption is deterministic under the seed") {
    HistoryContext ctx = full_history(17);
    CorruptionPolicy pol = CorruptionPolicy::base_defaults();
    Rng a(99), b(99);
    CHECK(corrupt_history(ctx, pol, a).frames.data == corrupt_history(ctx, pol, b).frames.data);

    CorruptionPolicy noisy = only(CorruptKind::Noise);
    noisy.noise_min = noisy.noise_max = 0.3;
    Rng c(99), d(100);
    CHECK(corrupt_history(ctx, noisy, c).frames.data !=
          corrupt_history(ctx, noisy, d).frames.data);
}

TEST_CASE("anchor and zero-filled slots pass through untouched") {
    MemoryPlan plan = tiny_plan();
    std::vector<Latent> stream;
    for (int i = 0; i < 3; i++) stream.push_back(seeded_gaussian({1, 2, 1, 8, 8}, 50 + i));
    HistoryContext ctx = build_history(stream, &stream.front(), plan);
    REQUIRE(ctx.anchor_present);
    REQUIRE(ctx.zeroed[1] == 1);
    REQUIRE(ctx.zeroed[2] == 1);

    CorruptionPolicy pol = only(CorruptKind::Noise);
    pol.noise_min = pol.noise_max = 0.3;
    Rng rng(8);
    HistoryContext out = corrupt_history(ctx, pol, rng);

    CHECK_FALSE(frame_differs(out.frames, ctx.frames, 0));  // anchor slot
    CHECK_FALSE(frame_differs(out.frames, ctx.frames, 1));  // zero padding
    CHECK_FALSE(frame_differs(out.frames, ctx.frames, 2));
    CHECK(frame_differs(out.frames, ctx.frames, 3));
    CHECK(frame_differs(out.frames, ctx.frames, 4));
    CHECK(frame_differs(out.frames, ctx.frames, 5));
}

TEST_CASE("corrupting an all-zero history keeps the task mode readable") {
    HistoryContext ctx = t2v_history(tiny_plan(), 1, 2);
    CorruptionPolicy pol = only(CorruptKind::Noise);
    pol.noise_min = pol.noise_max = 0.3;
    Rng rng(3);
    HistoryContext out = corrupt_history(ctx, pol, rng);
    CHECK(out.frames.data == ctx.frames.data);
    CHECK(task_mode(out) == TaskMode::T2V);
}

TEST_CASE("tracker validation") {
    DriftTracker t;
    CHECK_NOTHROW(t.validate());
    t.rho_mean = 1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t.rho_mean = 0.9;
    t.rho_var = 0.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t.rho_var = 0.9;
    t.delta_mean = 0.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("EMA update arithmetic") {
    DriftTracker t;
    update_tracker(t, stats1(0.5, 0.1));
    CHECK(t.sections == 1);
    CHECK(t.mean_ema[0] == 0.5);
    CHECK(t.var_ema[0] == 0.1);

    update_tracker(t, stats1(0.9, 0.1));
    CHECK(t.mean_ema[0] == doctest::Approx(0.54).epsilon(1e-12));
}

TEST_CASE("constant stream is a fixed point of the EMA") {
    DriftTracker t;
    for (int i = 0; i < 30; i++) update_tracker(t, stats1(0.7, 0.2));
    CHECK(t.mean_ema[0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(t.var_ema[0] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("50-section stream matches the unrolled geometric sum") {
    const int n = 50;
    const std::size_t channels = 2;
    DriftTracker t;
    t.rho_mean = 0.85;
    t.rho_var = 0.7;

    Rng rng(2025);
    std::vector<std::vector<double>> means, vars;
    for (int i = 0; i < n; i++) {
        std::vector<double> m(channels), v(channels);
        for (std::size_t c = 0; c < channels; c++) {
            m[c] = rng.uniform(-1.0, 1.0);
            v[c] = rng.uniform(0.05, 0.5);
        }
        means.push_back(m);
        vars.push_back(v);
        ChannelStats s;
        s.mean = m;
        s.var = v;
        update_tracker(t, s);
    }

    // ema_n = rho^(n-1) x_1 + (1-rho) * sum_{i=2..n} rho^(n-i) x_i
    for (std::size_t c = 0; c < channels; c++) {
        double em = std::pow(t.rho_mean, n - 1) * means[0][c];
        double ev = std::pow(t.rho_var, n - 1) * vars[0][c];
        for (int i = 2; i <= n; i++) {
            em += (1.0 - t.rho_mean) * std::pow(t.rho_mean, n - i) * means[static_cast<std::size_t>(i - 1)][c];
            ev += (1.0 - t.rho_var) * std::pow(t.rho_var, n - i) * vars[static_cast<std::size_t>(i - 1)][c];
        }
        CHECK(t.mean_ema[c] == doctest::Approx(em).epsilon(1e-10));
        CHECK(t.var_ema[c] == doctest::Approx(ev).epsilon(1e-10));
    }
}

TEST_CASE("update_tracker rejects inconsistent channel counts") {
    DriftTracker t;
    ChannelStats lopsided;
    lopsided.mean = {0.1, 0.2};
    lopsided.var = {0.3};
    CHECK_THROWS_AS(update_tracker(t, lopsided), DimensionError);

    update_tracker(t, stats1(0.5, 0.1));
    ChannelStats wider;
    wider.mean = {0.1, 0.2};
    wider.var = {0.3, 0.4};
    CHECK_THROWS_AS(update_tracker(t, wider), DimensionError);
    CHECK_THROWS_AS(drift_triggered(t, wider), DimensionError);
}

TEST_CASE("statistics jump triggers the detector") {
    DriftTracker t;
    for (int i = 0; i < 3; i++) {
        update_tracker(t, stats1(0.5, 0.1));
        CHECK_FALSE(drift_triggered(t, stats1(0.5, 0.1)));
    }

    ChannelStats jump = stats1(0.9, 0.5);
    update_tracker(t, jump);
    CHECK(t.mean_ema[0] == doctest::Approx(0.54).epsilon(1e-12));
    CHECK(t.var_ema[0] == doctest::Approx(0.14).epsilon(1e-12));
    CHECK(std::abs(jump.mean[0] - t.mean_ema[0]) == doctest::Approx(0.36).epsilon(1e-12));
    CHECK(std::abs(jump.var[0] - t.var_ema[0]) == doctest::Approx(0.36).epsilon(1e-12));
    CHECK(drift_triggered(t, jump));
}

TEST_CASE("deviation is measured against the updated EMA") {
    // Raw jump distance is 0.40; after folding the jump in it shrinks to 0.36.
    // A threshold between the two separates the orderings.
    auto run = [](double delta) {
        DriftTracker t;
        t.delta_mean = t.delta_var = delta;
        for (int i = 0; i < 3; i++) update_tracker(t, stats1(0.5, 0.1));
        ChannelStats jump = stats1(0.9, 0.5);
        update_tracker(t, jump);
        return drift_triggered(t, jump);
    };
    CHECK(run(0.35));
    CHECK_FALSE(run(0.38));
}

TEST_CASE("detector needs both statistics to deviate") {
    DriftTracker t1;
    for (int i = 0; i < 3; i++) update_tracker(t1, stats1(0.5, 0.1));
    ChannelStats mean_only = stats1(0.9, 0.1);
    update_tracker(t1, mean_only);
    CHECK_FALSE(drift_triggered(t1, mean_only));

    DriftTracker t2;
    for (int i = 0; i < 3; i++) update_tracker(t2, stats1(0.5, 0.1));
    ChannelStats var_only = stats1(0.5, 0.5);
    update_tracker(t2, var_only);
    CHECK_FALSE(drift_triggered(t2, var_only));
}

TEST_CASE("stationary and mildly wobbling streams never trigger") {
    DriftTracker flat;
    for (int i = 0; i < 100; i++) {
        update_tracker(flat, stats1(0.5, 0.1));
        CHECK_FALSE(drift_triggered(flat, stats1(0.5, 0.1)));
    }

    DriftTracker wobble;
    wobble.delta_mean = wobble.delta_var = 0.5;
    for (int i = 0; i < 100; i++) {
        ChannelStats s = stats1(0.5 + 0.02 * std::sin(i), 0.1 + 0.01 * std::cos(i));
        update_tracker(wobble, s);
        CHECK_FALSE(drift_triggered(wobble, s));
    }
}

TEST_CASE("tracker EMA is scale-equivariant") {
    // Doubling is exact in both f32 data and f64 statistics, so the scaled
    // tracker matches bitwise: mean by c, variance by c^2.
    DriftTracker base, scaled;
    for (int i = 0; i < 5; i++) {
        Latent x = seeded_gaussian({1, 3, 2, 6, 6}, 700 + static_cast<std::uint64_t>(i));
        Latent y = x;
        for (float& v : y.data) v *= 2.0f;
        ChannelStats sx = section_stats(x);
        ChannelStats sy = section_stats(y);
        for (std::size_t c = 0; c < sx.mean.size(); c++) {
            CHECK(sy.mean[c] == 2.0 * sx.mean[c]);
            CHECK(sy.var[c] == 4.0 * sx.var[c]);
        }
        update_tracker(base, sx);
        update_tracker(scaled, sy);
    }
    for (std::size_t c = 0; c < base.mean_ema.size(); c++) {
        CHECK(scaled.mean_ema[c] == 2.0 * base.mean_ema[c]);
        CHECK(scaled.var_ema[c] == 4.0 * base.var_ema[c]);
    }

    // Generic factor, tolerance-level equivariance straight on the stats.
    const double k = 1.7;
    DriftTracker a, b;
    Rng rng(31);
    for (int i = 0; i < 8; i++) {
        ChannelStats s;
        s.mean = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        s.var = {rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)};
        ChannelStats t;
        t.mean = {k * s.mean[0], k * s.mean[1]};
        t.var = {k * k * s.var[0], k * k * s.var[1]};
        update_tracker(a, s);
        update_tracker(b, t);
    }
    for (std::size_t c = 0; c < 2; c++) {
        CHECK(b.mean_ema[c] == doctest::Approx(k * a.mean_ema[c]).epsilon(1e-12));
        CHECK(b.var_ema[c] == doctest::Approx(k * k * a.var_ema[c]).epsilon(1e-12));
    }
}

TEST_CASE("adaptive corruption is the identity when not flagged") {
    HistoryContext ctx = full_history(19);
    CorruptionPolicy pol = only(CorruptKind::Noise);
    pol.noise_min = pol.noise_max = 0.3;
    Rng rng(4);
    HistoryContext out = adaptive_corrupt(ctx, false, pol, 2, rng);
    CHECK(out.frames.data == ctx.frames.data);
    CHECK(out.zeroed == ctx.zeroed);
    CHECK(out.anchor_present == ctx.anchor_present);
}

TEST_CASE("adaptive corruption touches only the flagged tail frames") {
    HistoryContext ctx = full_history(20);
    CorruptionPolicy pol = only(CorruptKind::Noise);
    pol.noise_min = pol.noise_max = 0.3;

    Rng rng(6);
    HistoryContext out = adaptive_corrupt(ctx, true, pol, 2, rng);
    const std::int64_t total = ctx.frames.dims.t;
    for (std::int64_t t = 0; t < total; t++)
        CHECK(frame_differs(out.frames, ctx.frames, t) == (t >= total - 2));

    Rng rng2(6);
    HistoryContext clean = adaptive_corrupt(ctx, true, only(CorruptKind::Clean), 2, rng2);
    CHECK(clean.frames.data == ctx.frames.data);

    // Oversized tail clamps to the whole window; the anchor stays exempt.
    HistoryContext anchored = ctx;
    anchored.anchor_present = true;
    Rng rng3(6);
    HistoryContext all = adaptive_corrupt(anchored, true, pol, 100, rng3);
    CHECK_FALSE(frame_differs(all.frames, ctx.frames, 0));
    for (std::int64_t t = 1; t < total; t++) CHECK(frame_differs(all.frames, ctx.frames, t));

    Rng rng4(6);
    CHECK_THROWS_AS(adaptive_corrupt(ctx, true, pol, -1, rng4), DimensionError);
}

TEST_SUITE_END();
