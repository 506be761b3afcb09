#include <numeric>
#include <vector>

#include "doctest.h"
#include "latflow/context.hpp"

using namespace latflow;

namespace {

Latent const_frame(float v, const MemoryPlan& plan, std::int64_t b = 1, std::int64_t c = 2) {
    Latent f({b, c, 1, plan.h, plan.w});
    std::fill(f.data.begin(), f.data.end(), v);
    return f;
}

// Literal sliding-window simulation, independent of the library's slot
// arithmetic: pops the stream tail term by term and returns the expected
// frame index per slot (-1 for a zero-padded slot). Anchor goes to slot 0.
std::vector<std::int64_t> oracle_slots(std::int64_t n_frames, const MemoryPlan& plan, bool anchored) {
    std::vector<std::int64_t> stream(static_cast<std::size_t>(n_frames));
    std::iota(stream.begin(), stream.end(), 0);
    auto pop_tail = [&stream](std::int64_t want) {
        std::vector<std::int64_t> out;
        while (want-- > 0 && !stream.empty()) {
            out.insert(out.begin(), stream.back());
            stream.pop_back();
        }
        return out;
    };
    std::vector<std::int64_t> shortv = pop_tail(plan.frames[0]);
    std::vector<std::int64_t> midv = pop_tail(plan.frames[1]);
    std::vector<std::int64_t> longv = pop_tail(plan.frames[2] - (anchored ? 1 : 0));

    std::vector<std::int64_t> slots(static_cast<std::size_t>(plan.total_frames()), -1);
    auto fill_tail = [&slots](std::int64_t begin, std::int64_t len, const std::vector<std::int64_t>& vals) {
        std::int64_t s = begin + len - 1;
        for (auto it = vals.rbegin(); it != vals.rend(); ++it) slots[static_cast<std::size_t>(s--)] = *it;
    };
    fill_tail(plan.short_begin(), plan.frames[0], shortv);
    fill_tail(plan.mid_begin(), plan.frames[1], midv);
    if (anchored) {
        fill_tail(1, plan.frames[2] - 1, longv);
        if (n_frames > 0) slots[0] = 0;
    } else {
        fill_tail(0, plan.frames[2], longv);
    }
    return slots;
}

}  // namespace

TEST_SUITE_BEGIN("context");

TEST_CASE("token budget for the reference plan") {
    MemoryPlan plan;  // short/mid/long (2,2,16), kernels (1,2,2)(2,4,4)(4,8,8), 48x80
    TokenBudget tb = token_budget(plan);
    CHECK(tb.per_term[0] == Rat(1920));
    CHECK(tb.per_term[1] == Rat(240));
    CHECK(tb.per_term[2] == Rat(240));
    CHECK(tb.total == Rat(2400));
}

TEST_CASE("token budget equals brute-force patch enumeration") {
    Rng rng(17);
    for (int trial = 0; trial < 20; trial++) {
        MemoryPlan plan;
        std::int64_t pts[3], phs[3], pws[3];
        for (int i = 0; i < 3; i++) {
            pts[i] = static_cast<std::int64_t>(1) << rng.below(3);
            phs[i] = static_cast<std::int64_t>(1) << rng.below(4);
            pws[i] = static_cast<std::int64_t>(1) << rng.below(4);
            plan.kernels[static_cast<std::size_t>(i)] = {pts[i], phs[i], pws[i]};
            plan.frames[static_cast<std::size_t>(i)] = pts[i] * static_cast<std::int64_t>(1 + rng.below(4));
        }
        plan.h = 8 * static_cast<std::int64_t>(1 + rng.below(6));
        plan.w = 8 * static_cast<std::int64_t>(1 + rng.below(6));
        TokenBudget tb = token_budget(plan);
        std::int64_t count = 0;
        for (int i = 0; i < 3; i++)
            for (std::int64_t t = 0; t < plan.frames[static_cast<std::size_t>(i)]; t += pts[i])
                for (std::int64_t h = 0; h < plan.h; h += phs[i])
                    for (std::int64_t w = 0; w < plan.w; w += pws[i]) count++;
        REQUIRE(tb.total.is_integer());
        CHECK(tb.total.num == count);
    }
}

TEST_CASE("plan validation rejects non-divisible kernels") {
    MemoryPlan plan;
    plan.frames = {2, 2, 15};  // 15 % 4 != 0
    CHECK_THROWS_AS(token_budget(plan), ConfigError);
}

TEST_CASE("history assembly matches the sliding-window oracle over 10 sections") {
    MemoryPlan plan;
    plan.frames = {6, 2, 3};
    plan.kernels = {{{2, 2, 2}, {1, 2, 2}, {1, 1, 1}}};
    plan.h = 4;
    plan.w = 4;
    std::vector<Latent> stream;
    for (int section = 0; section < 10; section++) {
        for (int j = 0; j < 3; j++)
            stream.push_back(const_frame(static_cast<float>(stream.size()) + 1.0f, plan));
        HistoryContext ctx = build_history(stream, &stream.front(), plan);
        std::vector<std::int64_t> want = oracle_slots(static_cast<std::int64_t>(stream.size()), plan, true);
        CHECK(ctx.anchor_present);
        for (std::int64_t s = 0; s < plan.total_frames(); s++) {
            float got = ctx.frames.at(0, 0, s, 0, 0);
            std::int64_t idx = want[static_cast<std::size_t>(s)];
            if (idx < 0) {
                CHECK(got == 0.0f);
                CHECK(ctx.zeroed[static_cast<std::size_t>(s)] == 1);
                CHECK(frame_is_zero(ctx.frames, s));
            } else {
                CHECK(got == static_cast<float>(idx) + 1.0f);
                CHECK(ctx.zeroed[static_cast<std::size_t>(s)] == 0);
            }
        }
    }
}

TEST_CASE("after 100 frames the anchor still occupies long-term slot 0") {
    MemoryPlan plan;
    plan.h = 8;
    plan.w = 8;
    plan.kernels = {{{1, 1, 1}, {2, 2, 2}, {4, 2, 2}}};  // (2,2,16) frames stay at default
    std::vector<Latent> stream;
    for (int i = 0; i < 100; i++) stream.push_back(const_frame(static_cast<float>(i) + 1.0f, plan));
    HistoryContext ctx = build_history(stream, &stream.front(), plan);
    CHECK(ctx.frames.at(0, 0, 0, 0, 0) == 1.0f);    // frame 0, the anchor
    CHECK(ctx.frames.at(0, 0, 1, 0, 0) == 82.0f);   // frame 81 displace-adjacent
    CHECK(ctx.frames.at(0, 0, 2, 0, 0) == 83.0f);   // mid term: frames 82..83
    CHECK(ctx.frames.at(0, 0, 3, 0, 0) == 84.0f);
    CHECK(ctx.frames.at(0, 0, 19, 0, 0) == 100.0f);  // newest frame 99 in the last slot
}

TEST_CASE("anchor slot equals the stored first frame bitwise") {
    MemoryPlan plan;
    plan.frames = {4, 2, 2};
    plan.kernels = {{{2, 2, 2}, {1, 2, 2}, {1, 1, 1}}};
    plan.h = 4;
    plan.w = 4;
    std::vector<Latent> stream;
    Rng rng(5);
    for (int i = 0; i < 12; i++) {
        Latent f({1, 2, 1, 4, 4});
        for (auto& v : f.data) v = static_cast<float>(rng.normal());
        stream.push_back(f);
    }
    HistoryContext ctx = build_history(stream, &stream.front(), plan);
    REQUIRE(ctx.anchor_present);
    for (std::int64_t c = 0; c < 2; c++)
        for (std::int64_t h = 0; h < 4; h++)
            for (std::int64_t w = 0; w < 4; w++)
                CHECK(ctx.frames.at(0, c, 0, h, w) == stream.front().at(0, c, 0, h, w));
}

TEST_CASE("task mode from supplied history") {
    MemoryPlan plan;
    plan.frames = {4, 2, 2};
    plan.kernels = {{{2, 2, 2}, {1, 2, 2}, {1, 1, 1}}};
    plan.h = 4;
    plan.w = 4;

    HistoryContext zero = t2v_history(plan, 1, 2);
    CHECK(task_mode(zero) == TaskMode::T2V);

    Latent img = const_frame(0.7f, plan);
    HistoryContext i2v = i2v_history(img, plan);
    CHECK(task_mode(i2v) == TaskMode::I2V);

    std::vector<Latent> stream = {const_frame(1.0f, plan), const_frame(2.0f, plan)};
    HistoryContext v2v = build_history(stream, &stream.front(), plan);
    CHECK(task_mode(v2v) == TaskMode::V2V);
}

TEST_CASE("task simulation zeroes history per drawn mode and honors the mix") {
    MemoryPlan plan;
    plan.frames = {4, 2, 2};
    plan.kernels = {{{2, 2, 2}, {1, 2, 2}, {1, 1, 1}}};
    plan.h = 4;
    plan.w = 4;
    std::vector<Latent> stream;
    for (int i = 0; i < 8; i++) stream.push_back(const_frame(static_cast<float>(i) + 1.0f, plan));

    TaskModeDist dist;
    Rng rng(99);
    int counts[3] = {0, 0, 0};
    const int draws = 10000;
    for (int i = 0; i < draws; i++) {
        HistoryContext ctx = build_history(stream, &stream.front(), plan);
        TaskMode m = zero_out_history(ctx, dist, rng);
        counts[static_cast<int>(m)]++;
        CHECK(task_mode(ctx) == m);
        for (std::int64_t s = 0; s < plan.total_frames(); s++)
            if (ctx.zeroed[static_cast<std::size_t>(s)]) CHECK(frame_is_zero(ctx.frames, s));
    }
    CHECK(std::abs(counts[0] / double(draws) - 0.3) < 0.02);
    CHECK(std::abs(counts[1] / double(draws) - 0.3) < 0.02);
    CHECK(std::abs(counts[2] / double(draws) - 0.4) < 0.02);
}

TEST_CASE("rolling buffer matches full-stream assembly and stays bounded") {
    MemoryPlan plan;
    plan.frames = {4, 2, 2};
    plan.kernels = {{{2, 2, 2}, {1, 2, 2}, {1, 1, 1}}};
    plan.h = 4;
    plan.w = 4;
    HistoryBuffer buf(plan);
    std::vector<Latent> stream;
    std::size_t bytes_at_10 = 0;
    for (int i = 0; i < 100; i++) {
        Latent f = const_frame(static_cast<float>(i) + 1.0f, plan);
        buf.push(f);
        stream.push_back(f);
        if (i == 9) bytes_at_10 = buf.window_bytes();
    }
    CHECK(buf.window_bytes() == bytes_at_10);
    HistoryContext a = buf.assemble();
    HistoryContext b = build_history(stream, &stream.front(), plan);
    CHECK(std::equal(a.frames.data.begin(), a.frames.data.end(), b.frames.data.begin()));
}

TEST_CASE("rope positions, post- and pre-patchification") {
    MemoryPlan plan;  // short/mid/long (2,2,16) with temporal kernels (1,2,4)
    RopePlan post = rope_indices(plan, 3);
    REQUIRE(post.hist_pos.size() == 7);  // 4 long + 1 mid + 2 short
    for (std::int64_t i = 0; i < 7; i++) CHECK(post.hist_pos[static_cast<std::size_t>(i)] == i);
    REQUIRE(post.noisy_pos.size() == 3);
    CHECK(post.noisy_pos[0] == 7);
    CHECK(post.noisy_pos[2] == 9);

    RopePlan pre = rope_indices(plan, 3, RopeIndexing::PrePatch);
    std::vector<std::int64_t> want = {0, 4, 8, 12, 16, 18, 19};
    CHECK(pre.hist_pos == want);
    CHECK(pre.noisy_pos == std::vector<std::int64_t>{20, 21, 22});
}

TEST_CASE("prompt interpolation is affine") {
    Rng rng(3);
    PromptEmbedding a = randn_mat(4, 8, rng);
    PromptEmbedding b = randn_mat(4, 8, rng);
    PromptEmbedding mid = interpolate_prompts(a, b, 0.25);
    for (std::size_t i = 0; i < mid.a.size(); i++)
        CHECK(mid.a[i] == doctest::Approx(0.75 * a.a[i] + 0.25 * b.a[i]).epsilon(1e-12));
    PromptEmbedding at0 = interpolate_prompts(a, b, 0.0);
    PromptEmbedding at1 = interpolate_prompts(a, b, 1.0);
    CHECK(std::equal(at0.a.begin(), at0.a.end(), a.a.begin()));
    CHECK(std::equal(at1.a.begin(), at1.a.end(), b.a.begin()));
}

TEST_SUITE_END();
