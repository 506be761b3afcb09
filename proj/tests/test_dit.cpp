#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "latflow/rng.hpp"
#include "latflow/toy_dit.hpp"

using namespace latflow;

TEST_SUITE_BEGIN("toy_dit");

namespace {

MemoryPlan tiny_plan() {
    MemoryPlan p;
    p.frames = {2, 2, 2};
    p.kernels = {{{1, 2, 2}, {2, 2, 2}, {1, 4, 4}}};
    p.h = 4;
    p.w = 4;
    return p;
}

DitConfig tiny_cfg() {
    DitConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_text = 4;
    c.mlp_mult = 2;
    c.channels = 2;
    c.k_stages = 3;
    c.noisy_kernel = {1, 2, 2};
    return c;
}

// Gradient checks need every parameter away from its init special case: a zero
// head would zero all upstream gradients and make the comparison vacuous.
void randomize_params(DitParams& p, Rng& rng) {
    for_each_param(p, [&rng](const std::string& name, DMat& m) {
        bool gain = name.find("norm") != std::string::npos || name.find(".amp") != std::string::npos;
        for (auto& v : m.a) {
            if (gain)
                v = 1.0 + 0.2 * rng.normal();
            else
                v = 0.4 * rng.normal();
        }
    });
}

struct Fixture {
    DitConfig cfg = tiny_cfg();
    MemoryPlan plan = tiny_plan();
    DitParams params;
    HistoryContext hist;
    DLatent noisy;
    PromptEmbedding text;
    double lambda = 0.37;
    std::int64_t stage = 2;

    explicit Fixture(std::uint64_t seed, std::int64_t batch = 2) {
        params = make_dit_params(cfg, plan);
        Rng rng(seed);
        randomize_params(params, rng);
        hist.plan = plan;
        hist.frames = seeded_gaussian({batch, cfg.channels, plan.total_frames(), plan.h, plan.w}, seed + 1);
        hist.anchor_present = true;
        hist.zeroed.assign(static_cast<std::size_t>(plan.total_frames()), 0);
        noisy = widen(seeded_gaussian({batch, cfg.channels, 2, plan.h, plan.w}, seed + 2));
        text = DMat(3, cfg.d_text);
        for (auto& v : text.a) v = rng.normal();
    }
};

std::vector<std::pair<std::string, DMat*>> named_tensors(DitParams& p) {
    std::vector<std::pair<std::string, DMat*>> out;
    for_each_param(p, [&out](const std::string& n, DMat& m) { out.emplace_back(n, &m); });
    return out;
}

double weighted_sum(const DLatent& x, const DLatent& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.data.size(); i++) s += x.data[i] * w.data[i];
    return s;
}

bool fd_close(double analytic, double fd) {
    return std::abs(analytic - fd) <= 1e-4 * std::max({std::abs(analytic), std::abs(fd), 1e-4});
}

}  // namespace

TEST_CASE("config validation") {
    DitConfig c = tiny_cfg();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);  // 8 % 3
    c = tiny_cfg();
    c.d_model = 10;  // head dim 5 is odd
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameter count and init special cases") {
    DitParams p = make_dit_params(tiny_cfg(), tiny_plan());
    CHECK(param_count(p) == 2376);
    Rng rng(7);
    init_dit_params(p, rng);
    for_each_param(p, [](const std::string& name, const DMat& m) {
        bool gain = name.find("norm") != std::string::npos || name.find(".amp") != std::string::npos;
        bool zero = name.find(".b") != std::string::npos || name.find("_b") != std::string::npos ||
                    name.find(".cb") != std::string::npos || name == "head.w";
        if (gain) {
            for (double v : m.a) CHECK(v == 1.0);
        } else if (zero) {
            for (double v : m.a) CHECK(v == 0.0);
        } else {
            double nonzero = 0;
            for (double v : m.a) nonzero += (v != 0.0);
            CHECK(nonzero == static_cast<double>(m.a.size()));
        }
    });
}

TEST_CASE("freshly initialized model predicts the zero field") {
    Fixture f(11, 1);
    Rng rng(3);
    init_dit_params(f.params, rng);  // head starts at zero
    DLatent out = dit_forward(f.params, f.noisy, f.hist, f.text, 0.5, 1);
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("timestep features") {
    DMat f0 = timestep_features(0.0, 8);
    for (int j = 0; j < 4; j++) {
        CHECK(f0.a[static_cast<std::size_t>(j)] == 0.0);
        CHECK(f0.a[static_cast<std::size_t>(4 + j)] == 1.0);
    }
    double v = 137.0;
    DMat f = timestep_features(v, 8);
    CHECK(f.a[0] == doctest::Approx(std::sin(v)).epsilon(1e-12));
    CHECK(f.a[4] == doctest::Approx(std::cos(v)).epsilon(1e-12));
    double freq1 = std::pow(10000.0, -1.0 / 4.0);
    CHECK(f.a[1] == doctest::Approx(std::sin(v * freq1)).epsilon(1e-12));
    CHECK_THROWS_AS(timestep_features(1.0, 7), ConfigError);
}

TEST_CASE("record geometry and token positions") {
    Fixture f(21, 1);
    DitRecord rec;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec);
    REQUIRE(rec.items.size() == 1);
    const DitItemRecord& it = rec.items[0];
    CHECK(it.n_noisy == 8);   // 2 temporal patches x (4/2)(4/2)
    CHECK(it.n_hist == 14);   // long 2, mid 4, short 8 token rows
    REQUIRE(it.positions.size() == 22);
    std::vector<std::int64_t> expected = {5, 5, 5, 5, 6, 6, 6, 6,            // noisy, two temporal patches
                                          0, 1,                              // long: one token per frame
                                          2, 2, 2, 2,                        // mid: single merged patch
                                          3, 3, 3, 3, 4, 4, 4, 4};           // short: two temporal patches
    CHECK(it.positions == expected);
    CHECK(&rec.layer_output(0, 0) == &rec.items[0].layers[1].x_in);
    CHECK(&rec.layer_output(0, 1) == &rec.items[0].x_final);
    CHECK_THROWS_AS(rec.layer_output(0, 2), ConfigError);
}

TEST_CASE("history token layout is long then mid then short") {
    Fixture f(31, 1);
    // only long-term slots carry signal
    HistoryContext hl = f.hist;
    std::fill(hl.frames.data.begin(), hl.frames.data.end(), 0.0f);
    for (std::int64_t t = 0; t < 2; t++)
        for (std::int64_t c = 0; c < 2; c++)
            for (std::int64_t y = 0; y < 4; y++)
                for (std::int64_t x = 0; x < 4; x++) hl.frames.at(0, c, t, y, x) = 1.0f + static_cast<float>(x);
    DMat rows = embed_history(f.params, hl, 0);
    REQUIRE(rows.rows == 14);
    for (std::int64_t i = 0; i < 2; i++) {
        double mag = 0;
        for (std::int64_t j = 0; j < rows.cols; j++) mag += std::abs(rows(i, j));
        CHECK(mag > 0.0);
    }
    for (std::int64_t i = 2; i < 14; i++)
        for (std::int64_t j = 0; j < rows.cols; j++) CHECK(rows(i, j) == 0.0);

    // only short-term slots carry signal
    HistoryContext hs = f.hist;
    std::fill(hs.frames.data.begin(), hs.frames.data.end(), 0.0f);
    for (std::int64_t t = 4; t < 6; t++)
        for (std::int64_t c = 0; c < 2; c++)
            for (std::int64_t y = 0; y < 4; y++)
                for (std::int64_t x = 0; x < 4; x++) hs.frames.at(0, c, t, y, x) = 0.5f + static_cast<float>(y);
    rows = embed_history(f.params, hs, 0);
    for (std::int64_t i = 0; i < 6; i++)
        for (std::int64_t j = 0; j < rows.cols; j++) CHECK(rows(i, j) == 0.0);
    double mag = 0;
    for (std::int64_t i = 6; i < 14; i++)
        for (std::int64_t j = 0; j < rows.cols; j++) mag += std::abs(rows(i, j));
    CHECK(mag > 0.0);
}

TEST_CASE("zeroed history embeds to exactly zero tokens") {
    DitConfig cfg = tiny_cfg();
    MemoryPlan plan = tiny_plan();
    DitParams p = make_dit_params(cfg, plan);
    Rng rng(5);
    randomize_params(p, rng);
    HistoryContext hist = t2v_history(plan, 1, cfg.channels);
    DMat rows = embed_history(p, hist, 0);
    CHECK(rows.rows == 14);
    for (double v : rows.a) CHECK(v == 0.0);
}

TEST_CASE("history conditioning ignores blend value and stage") {
    Fixture f(41, 1);
    DitRecord ra, rb, rc;
    dit_forward(f.params, f.noisy, f.hist, f.text, 0.2, 1, &ra);
    dit_forward(f.params, f.noisy, f.hist, f.text, 0.8, 1, &rb);
    dit_forward(f.params, f.noisy, f.hist, f.text, 0.2, 3, &rc);
    const DMat& xa = ra.items[0].layers[0].x_in;
    const DMat& xb = rb.items[0].layers[0].x_in;
    const DMat& xc = rc.items[0].layers[0].x_in;
    std::int64_t ln = ra.items[0].n_noisy, l = ln + ra.items[0].n_hist;
    for (std::int64_t i = ln; i < l; i++)
        for (std::int64_t j = 0; j < xa.cols; j++) {
            CHECK(xa(i, j) == xb(i, j));
            CHECK(xa(i, j) == xc(i, j));
        }
    double diff_lambda = 0, diff_stage = 0;
    for (std::int64_t i = 0; i < ln; i++)
        for (std::int64_t j = 0; j < xa.cols; j++) {
            diff_lambda += std::abs(xa(i, j) - xb(i, j));
            diff_stage += std::abs(xa(i, j) - xc(i, j));
        }
    CHECK(diff_lambda > 0.0);
    CHECK(diff_stage > 0.0);
}

TEST_CASE("text cross block passes history rows through untouched") {
    Fixture f(51, 2);
    DitRecord rec;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec);
    for (const DitItemRecord& it : rec.items) {
        std::int64_t ln = it.n_noisy, l = ln + it.n_hist;
        for (const DitLayerRecord& lr : it.layers) {
            for (std::int64_t i = ln; i < l; i++)
                for (std::int64_t j = 0; j < lr.x_mid.cols; j++) CHECK(lr.x_mid2(i, j) == lr.x_mid(i, j));
            double moved = 0;
            for (std::int64_t i = 0; i < ln; i++)
                for (std::int64_t j = 0; j < lr.x_mid.cols; j++) moved += std::abs(lr.x_mid2(i, j) - lr.x_mid(i, j));
            CHECK(moved > 0.0);
        }
    }
}

TEST_CASE("parameter gradients match central differences") {
    Fixture f(61);
    DLatent wfix = widen(seeded_gaussian(f.noisy.dims, 999));

    DitRecord rec;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec);
    DitParams grads = zeros_like(f.params);
    dit_backward(f.params, rec, f.hist, f.text, wfix, grads);

    auto pv = named_tensors(f.params);
    auto gv = named_tensors(grads);
    REQUIRE(pv.size() == gv.size());
    Rng pick(77);
    for (std::size_t ti = 0; ti < pv.size(); ti++) {
        DMat* theta = pv[ti].second;
        const DMat* g = gv[ti].second;
        std::int64_t n = static_cast<std::int64_t>(theta->a.size());
        for (int probe = 0; probe < 3; probe++) {
            std::int64_t idx = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(n)));
            double saved = theta->a[static_cast<std::size_t>(idx)];
            double h = 1e-5 * (1.0 + std::abs(saved));
            theta->a[static_cast<std::size_t>(idx)] = saved + h;
            double lp = weighted_sum(dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage), wfix);
            theta->a[static_cast<std::size_t>(idx)] = saved - h;
            double lm = weighted_sum(dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage), wfix);
            theta->a[static_cast<std::size_t>(idx)] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double an = g->a[static_cast<std::size_t>(idx)];
            INFO(pv[ti].first, "[", idx, "] analytic=", an, " fd=", fd);
            CHECK(fd_close(an, fd));
        }
    }
}

TEST_CASE("input gradient matches central differences") {
    Fixture f(71);
    DLatent wfix = widen(seeded_gaussian(f.noisy.dims, 998));
    DitRecord rec;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec);
    DitParams grads = zeros_like(f.params);
    DLatent dn = dit_backward(f.params, rec, f.hist, f.text, wfix, grads);

    Rng pick(88);
    for (int probe = 0; probe < 8; probe++) {
        std::int64_t idx = static_cast<std::int64_t>(pick.below(f.noisy.data.size()));
        double saved = f.noisy.data[static_cast<std::size_t>(idx)];
        double h = 1e-5 * (1.0 + std::abs(saved));
        f.noisy.data[static_cast<std::size_t>(idx)] = saved + h;
        double lp = weighted_sum(dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage), wfix);
        f.noisy.data[static_cast<std::size_t>(idx)] = saved - h;
        double lm = weighted_sum(dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage), wfix);
        f.noisy.data[static_cast<std::size_t>(idx)] = saved;
        double fd = (lp - lm) / (2.0 * h);
        INFO("noisy[", idx, "] analytic=", dn.data[static_cast<std::size_t>(idx)], " fd=", fd);
        CHECK(fd_close(dn.data[static_cast<std::size_t>(idx)], fd));
    }
}

TEST_CASE("tap gradients at layer outputs match central differences") {
    Fixture f(81);
    DitRecord rec;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec);
    std::int64_t ln = rec.items[0].n_noisy, d = f.cfg.d_model;

    Rng gr(17);
    DMat g0(ln, d), g1(ln, d);
    for (auto& v : g0.a) v = gr.normal();
    for (auto& v : g1.a) v = gr.normal();

    TapGrads taps;
    taps.per_item.resize(rec.items.size());
    taps.per_item[0][0] = g0;
    taps.per_item[0][1] = g1;

    DitParams grads = zeros_like(f.params);
    DLatent zero_out(f.noisy.dims);
    dit_backward(f.params, rec, f.hist, f.text, zero_out, grads, &taps);

    auto probe_loss = [&]() {
        DitRecord r;
        dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &r);
        double s = 0.0;
        const DMat& o0 = r.layer_output(0, 0);
        const DMat& o1 = r.layer_output(0, 1);
        for (std::int64_t i = 0; i < ln; i++)
            for (std::int64_t j = 0; j < d; j++) s += g0(i, j) * o0(i, j) + g1(i, j) * o1(i, j);
        return s;
    };

    auto pv = named_tensors(f.params);
    auto gv = named_tensors(grads);
    Rng pick(99);
    for (std::size_t ti = 0; ti < pv.size(); ti++) {
        DMat* theta = pv[ti].second;
        std::int64_t n = static_cast<std::int64_t>(theta->a.size());
        for (int probe = 0; probe < 2; probe++) {
            std::int64_t idx = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(n)));
            double saved = theta->a[static_cast<std::size_t>(idx)];
            double h = 1e-5 * (1.0 + std::abs(saved));
            theta->a[static_cast<std::size_t>(idx)] = saved + h;
            double lp = probe_loss();
            theta->a[static_cast<std::size_t>(idx)] = saved - h;
            double lm = probe_loss();
            theta->a[static_cast<std::size_t>(idx)] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double an = gv[ti].second->a[static_cast<std::size_t>(idx)];
            INFO(pv[ti].first, "[", idx, "] analytic=", an, " fd=", fd);
            CHECK(fd_close(an, fd));
        }
    }
    // the head never feeds a tapped activation
    for (double v : grads.head_w.a) CHECK(v == 0.0);
    for (double v : grads.head_b.a) CHECK(v == 0.0);
}

TEST_CASE("scalar-stat backward agrees bitwise with the full-cache reference") {
    Fixture f(91);
    DLatent wfix = widen(seeded_gaussian(f.noisy.dims, 997));

    DitRecord fused;
    fused.store_normalized = false;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &fused);
    DitParams ga = zeros_like(f.params);
    DLatent da = dit_backward(f.params, fused, f.hist, f.text, wfix, ga);

    DitRecord ref;
    ref.store_normalized = true;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &ref);
    CHECK(ref.items[0].zf.rows > 0);
    DitParams gb = zeros_like(f.params);
    DLatent db = dit_backward(f.params, ref, f.hist, f.text, wfix, gb);

    auto va = named_tensors(ga);
    auto vb = named_tensors(gb);
    for (std::size_t ti = 0; ti < va.size(); ti++) {
        std::int64_t diff = 0;
        for (std::size_t i = 0; i < va[ti].second->a.size(); i++)
            diff += (va[ti].second->a[i] != vb[ti].second->a[i]);
        INFO(va[ti].first);
        CHECK(diff == 0);
    }
    CHECK(std::equal(da.data.begin(), da.data.end(), db.data.begin()));
}

TEST_CASE("norm caches hold one scalar stat set per row") {
    Rng rng(101);
    DMat x(5, 6), g(1, 6), dy(5, 6);
    for (auto& v : x.a) v = rng.normal();
    for (auto& v : g.a) v = 1.0 + 0.1 * rng.normal();
    for (auto& v : dy.a) v = rng.normal();

    NormCache rc;
    DMat y = rmsnorm(x, g, 1e-6, &rc);
    CHECK(rc.inv_rms.size() == 5);
    LayerNormCache lc;
    DMat y2 = layernorm(x, g, 1e-6, &lc);
    CHECK(lc.mean.size() == 5);
    CHECK(lc.inv_std.size() == 5);

    // fused-vs-reference bitwise on the standalone kernel
    DMat dx1(5, 6), dg1(1, 6), dx2(5, 6), dg2(1, 6);
    rmsnorm_backward(dy, x, g, rc, dx1, dg1);
    DMat z(5, 6);
    for (std::int64_t i = 0; i < 5; i++)
        for (std::int64_t j = 0; j < 6; j++) z(i, j) = x(i, j) * rc.inv_rms[static_cast<std::size_t>(i)];
    rmsnorm_backward_ref(dy, z, g, rc, dx2, dg2);
    CHECK(std::equal(dx1.a.begin(), dx1.a.end(), dx2.a.begin()));
    CHECK(std::equal(dg1.a.begin(), dg1.a.end(), dg2.a.begin()));

    // finite-difference oracles for both norms
    auto loss_rms = [&]() {
        DMat yy = rmsnorm(x, g, 1e-6, nullptr);
        double s = 0;
        for (std::size_t i = 0; i < yy.a.size(); i++) s += yy.a[i] * dy.a[i];
        return s;
    };
    auto loss_ln = [&]() {
        DMat yy = layernorm(x, g, 1e-6, nullptr);
        double s = 0;
        for (std::size_t i = 0; i < yy.a.size(); i++) s += yy.a[i] * dy.a[i];
        return s;
    };
    DMat dxl(5, 6), dgl(1, 6);
    layernorm_backward(dy, x, g, lc, dxl, dgl);
    for (std::size_t i = 0; i < x.a.size(); i++) {
        double saved = x.a[i], h = 1e-6 * (1.0 + std::abs(saved));
        x.a[i] = saved + h;
        double lp = loss_rms(), lp2 = loss_ln();
        x.a[i] = saved - h;
        double lm = loss_rms(), lm2 = loss_ln();
        x.a[i] = saved;
        CHECK(dx1.a[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
        CHECK(dxl.a[i] == doctest::Approx((lp2 - lm2) / (2 * h)).epsilon(1e-5));
    }
    for (std::size_t i = 0; i < g.a.size(); i++) {
        double saved = g.a[i], h = 1e-6 * (1.0 + std::abs(saved));
        g.a[i] = saved + h;
        double lp = loss_rms(), lp2 = loss_ln();
        g.a[i] = saved - h;
        double lm = loss_rms(), lm2 = loss_ln();
        g.a[i] = saved;
        CHECK(dg1.a[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
        CHECK(dgl.a[i] == doctest::Approx((lp2 - lm2) / (2 * h)).epsilon(1e-5));
    }
    (void)y;
    (void)y2;
}

TEST_CASE("rotary map is invertible and norm preserving") {
    Rng rng(111);
    DMat m(6, 8);
    for (auto& v : m.a) v = rng.normal();
    std::vector<std::int64_t> pos = {0, 1, 5, 9, 2, 7};
    DMat r = rope_apply(m, pos, 10000.0, 2);
    DMat back = rope_apply_inverse(r, pos, 10000.0, 2);
    for (std::size_t i = 0; i < m.a.size(); i++) CHECK(back.a[i] == doctest::Approx(m.a[i]).epsilon(1e-12));
    for (std::int64_t i = 0; i < 6; i++) {
        double n0 = 0, n1 = 0;
        for (std::int64_t j = 0; j < 8; j++) {
            n0 += m(i, j) * m(i, j);
            n1 += r(i, j) * r(i, j);
        }
        CHECK(n1 == doctest::Approx(n0).epsilon(1e-12));
    }
    // position zero rotates by nothing
    for (std::int64_t j = 0; j < 8; j++) CHECK(r(0, j) == m(0, j));
}

TEST_CASE("guidance attention reduces to plain attention at amp one") {
    Rng rng(121);
    std::int64_t l = 7, heads = 2, dh = 3, d = heads * dh, n_noisy = 3;
    DMat q(l, d), k(l, d), v(l, d), amp1(heads, dh);
    for (auto& x : q.a) x = rng.normal();
    for (auto& x : k.a) x = rng.normal();
    for (auto& x : v.a) x = rng.normal();
    std::fill(amp1.a.begin(), amp1.a.end(), 1.0);

    DMat out = guidance_attention(q, k, v, n_noisy, amp1, heads);

    // local plain-attention oracle
    DMat expect(l, d);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::int64_t h = 0; h < heads; h++) {
        std::int64_t off = h * dh;
        for (std::int64_t i = 0; i < l; i++) {
            std::vector<double> logit(static_cast<std::size_t>(l));
            double mx = -1e300;
            for (std::int64_t j = 0; j < l; j++) {
                double acc = 0;
                for (std::int64_t dd = 0; dd < dh; dd++) acc += q(i, off + dd) * k(j, off + dd);
                logit[static_cast<std::size_t>(j)] = acc * scale;
                mx = std::max(mx, logit[static_cast<std::size_t>(j)]);
            }
            double zsum = 0;
            for (auto& lv : logit) zsum += std::exp(lv - mx);
            for (std::int64_t j = 0; j < l; j++) {
                double p = std::exp(logit[static_cast<std::size_t>(j)] - mx) / zsum;
                for (std::int64_t dd = 0; dd < dh; dd++) expect(i, off + dd) += p * v(j, off + dd);
            }
        }
    }
    for (std::size_t i = 0; i < out.a.size(); i++) CHECK(out.a[i] == doctest::Approx(expect.a[i]).epsilon(1e-12));

    // split-argument form sees the same tokens, gets the same answer
    auto rows = [](const DMat& m, std::int64_t r0, std::int64_t n) {
        DMat s(n, m.cols);
        std::copy(m.row(r0), m.row(r0) + n * m.cols, s.a.begin());
        return s;
    };
    DMat split = guidance_attention_split(rows(q, 0, n_noisy), rows(k, 0, n_noisy), rows(v, 0, n_noisy),
                                          rows(q, n_noisy, l - n_noisy), rows(k, n_noisy, l - n_noisy),
                                          rows(v, n_noisy, l - n_noisy), amp1, heads);
    CHECK(std::equal(split.a.begin(), split.a.end(), out.a.begin()));
}

TEST_CASE("amp zero wipes history logits before the softmax") {
    Rng rng(131);
    std::int64_t l = 6, heads = 2, dh = 4, d = heads * dh, n_noisy = 2;
    DMat q(l, d), k(l, d), v(l, d), amp0(heads, dh);
    for (auto& x : q.a) x = rng.normal();
    for (auto& x : k.a) x = rng.normal();
    for (auto& x : v.a) x = rng.normal();

    std::vector<DMat> probs, logits;
    guidance_attention(q, k, v, n_noisy, amp0, heads, &probs, &logits);
    REQUIRE(logits.size() == 2);
    for (const DMat& lg : logits)
        for (std::int64_t i = 0; i < l; i++)
            for (std::int64_t j = n_noisy; j < l; j++) CHECK(lg(i, j) == 0.0);
    // uniform mass across the history keys
    for (const DMat& pr : probs)
        for (std::int64_t i = 0; i < l; i++)
            for (std::int64_t j = n_noisy + 1; j < l; j++) CHECK(pr(i, j) == doctest::Approx(pr(i, n_noisy)).epsilon(1e-12));
}

TEST_CASE("amp sharpens history attention inside the model") {
    Fixture f(141, 1);
    DitRecord rec;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec);
    // with amp forced to zero every history column collapses to the uniform value
    for (auto& L : f.params.layers) std::fill(L.amp.a.begin(), L.amp.a.end(), 0.0);
    DitRecord rec0;
    dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage, &rec0);
    const DitItemRecord& it = rec0.items[0];
    std::int64_t ln = it.n_noisy, l = ln + it.n_hist;
    for (const DMat& pr : it.layers[0].probs)
        for (std::int64_t i = 0; i < l; i++)
            for (std::int64_t j = ln + 1; j < l; j++) CHECK(pr(i, j) == doctest::Approx(pr(i, ln)).epsilon(1e-12));
}

TEST_CASE("checkpoint roundtrip preserves every tensor and the forward pass") {
    Fixture f(151, 1);
    auto path = (std::filesystem::temp_directory_path() / "latflow_ckpt_test.bin").string();
    save_checkpoint(path, f.params);
    DitParams back = load_checkpoint(path);

    CHECK(back.cfg.d_model == f.cfg.d_model);
    CHECK(back.cfg.n_heads == f.cfg.n_heads);
    CHECK(back.cfg.n_layers == f.cfg.n_layers);
    CHECK(back.cfg.noisy_kernel.volume() == f.cfg.noisy_kernel.volume());
    CHECK(back.plan.frames == f.plan.frames);
    CHECK(back.plan.h == f.plan.h);

    auto va = named_tensors(f.params);
    auto vb = named_tensors(back);
    REQUIRE(va.size() == vb.size());
    for (std::size_t ti = 0; ti < va.size(); ti++) {
        INFO(va[ti].first);
        CHECK(std::equal(va[ti].second->a.begin(), va[ti].second->a.end(), vb[ti].second->a.begin()));
    }

    DLatent a = dit_forward(f.params, f.noisy, f.hist, f.text, f.lambda, f.stage);
    DLatent b = dit_forward(back, f.noisy, f.hist, f.text, f.lambda, f.stage);
    CHECK(std::equal(a.data.begin(), a.data.end(), b.data.begin()));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects damaged containers") {
    Fixture f(161, 1);
    auto dir = std::filesystem::temp_directory_path();
    auto path = (dir / "latflow_ckpt_damage.bin").string();
    save_checkpoint(path, f.params);
    auto fsize = std::filesystem::file_size(path);

    auto clone = [&](const std::string& name) {
        auto p2 = (dir / name).string();
        std::filesystem::copy_file(path, p2, std::filesystem::copy_options::overwrite_existing);
        return p2;
    };

    {  // magic
        auto p2 = clone("latflow_ckpt_magic.bin");
        std::fstream s(p2, std::ios::in | std::ios::out | std::ios::binary);
        s.seekp(0);
        s.put('X');
        s.close();
        CHECK_THROWS_AS(load_checkpoint(p2), BadMagicError);
        std::filesystem::remove(p2);
    }
    {  // version
        auto p2 = clone("latflow_ckpt_version.bin");
        std::fstream s(p2, std::ios::in | std::ios::out | std::ios::binary);
        s.seekp(4);
        std::uint32_t v = 9;
        s.write(reinterpret_cast<const char*>(&v), 4);
        s.close();
        CHECK_THROWS_AS(load_checkpoint(p2), VersionError);
        std::filesystem::remove(p2);
    }
    {  // truncation
        auto p2 = clone("latflow_ckpt_short.bin");
        std::filesystem::resize_file(p2, 100);
        CHECK_THROWS_AS(load_checkpoint(p2), TruncatedError);
        std::filesystem::remove(p2);
    }
    {  // dim tamper on the final tensor (head.b): cols u64 sits 72 bytes from the end
        auto p2 = clone("latflow_ckpt_dims.bin");
        std::fstream s(p2, std::ios::in | std::ios::out | std::ios::binary);
        s.seekp(static_cast<std::streamoff>(fsize) - 72);
        std::uint64_t cols = 7;
        s.write(reinterpret_cast<const char*>(&cols), 8);
        s.close();
        bool threw = false;
        try {
            load_checkpoint(p2);
        } catch (const ConfigError& e) {
            threw = true;
            CHECK(std::string(e.what()).find("head.b") != std::string::npos);
        }
        CHECK(threw);
        std::filesystem::remove(p2);
    }
    std::filesystem::remove(path);
}

TEST_SUITE_END();
