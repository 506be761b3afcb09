#include "latflow/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <utility>

#include "latflow/errors.hpp"
#include "latflow/nn_kernels.hpp"

namespace latflow {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

double population_variance(const DLatent& x) {
    double mean = 0.0;
    for (double v : x.data) mean += v;
    mean /= static_cast<double>(x.data.size());
    double var = 0.0;
    for (double v : x.data) var += (v - mean) * (v - mean);
    return var / static_cast<double>(x.data.size());
}

// Adjoint of upsample_nearest(x, 2): each coarse cell collects its 2x2 block.
DLatent sumpool2(const DLatent& g) {
    if (g.dims.h % 2 != 0 || g.dims.w % 2 != 0)
        throw DimensionError("transition adjoint needs even spatial dims, got " + g.dims.str());
    LatentDims od{g.dims.b, g.dims.c, g.dims.t, g.dims.h / 2, g.dims.w / 2};
    DLatent out(od);
    for (std::int64_t b = 0; b < od.b; b++)
        for (std::int64_t c = 0; c < od.c; c++)
            for (std::int64_t t = 0; t < od.t; t++)
                for (std::int64_t y = 0; y < od.h; y++)
                    for (std::int64_t x = 0; x < od.w; x++)
                        out.at(b, c, t, y, x) = g.at(b, c, t, 2 * y, 2 * x) + g.at(b, c, t, 2 * y, 2 * x + 1) +
                                                g.at(b, c, t, 2 * y + 1, 2 * x) + g.at(b, c, t, 2 * y + 1, 2 * x + 1);
    return out;
}

double softplus(double z) {
    if (z > 30.0) return z;
    if (z < -30.0) return std::exp(z);
    return std::log1p(std::exp(z));
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Head input is the mean over token rows; each stream yields one logit per tap.
struct HeadCache {
    DMat pooled, pre, hid, logits;
};

HeadCache head_forward(const GanHeads& h, std::size_t i, const DMat& acts) {
    if (acts.cols != h.w1[i].rows)
        throw DimensionError("critic activation width does not match the head input");
    if (acts.rows < 1) throw DimensionError("critic activations must be nonempty");
    HeadCache c;
    c.pooled = DMat(1, acts.cols);
    double inv_n = 1.0 / static_cast<double>(acts.rows);
    for (std::int64_t r = 0; r < acts.rows; r++)
        for (std::int64_t j = 0; j < acts.cols; j++) c.pooled.a[static_cast<std::size_t>(j)] += acts(r, j) * inv_n;
    c.pre = matmul(c.pooled, h.w1[i]);
    for (std::int64_t j = 0; j < c.pre.cols; j++) c.pre.a[static_cast<std::size_t>(j)] += h.b1[i](0, j);
    c.hid = DMat(1, c.pre.cols);
    for (std::size_t j = 0; j < c.hid.a.size(); j++) c.hid.a[j] = silu(c.pre.a[j]);
    c.logits = matmul(c.hid, h.w2[i]);
    c.logits.a[0] += h.b2[i](0, 0);
    return c;
}

// Backprop d(loss)/d(logit) through one head; accumulates into param grads
// when given and returns d(loss)/d(acts).
DMat head_backward(const GanHeads& h, std::size_t i, const DMat& acts, const HeadCache& c, double dlogit,
                   GanHeads* grads) {
    if (grads) {
        for (std::int64_t j = 0; j < c.hid.cols; j++)
            grads->w2[i].a[static_cast<std::size_t>(j)] += c.hid(0, j) * dlogit;
        grads->b2[i].a[0] += dlogit;
    }
    DMat dpre(1, c.pre.cols);
    for (std::int64_t j = 0; j < dpre.cols; j++)
        dpre.a[static_cast<std::size_t>(j)] = dlogit * h.w2[i](j, 0) * dsilu(c.pre(0, j));
    if (grads) {
        add_inplace(grads->w1[i], matmul_tn(c.pooled, dpre));
        add_inplace(grads->b1[i], dpre);
    }
    DMat dpooled = matmul_nt(dpre, h.w1[i]);
    DMat dacts(acts.rows, acts.cols);
    double inv_n = 1.0 / static_cast<double>(acts.rows);
    for (std::int64_t r = 0; r < acts.rows; r++)
        for (std::int64_t j = 0; j < acts.cols; j++) dacts.a[static_cast<std::size_t>(r * acts.cols + j)] = inv_n * dpooled(0, j);
    return dacts;
}

GanHeads zero_heads_like(const GanHeads& h) {
    GanHeads z;
    z.taps = h.taps;
    for (std::size_t i = 0; i < h.taps.size(); i++) {
        z.w1.emplace_back(h.w1[i].rows, h.w1[i].cols);
        z.b1.emplace_back(h.b1[i].rows, h.b1[i].cols);
        z.w2.emplace_back(h.w2[i].rows, h.w2[i].cols);
        z.b2.emplace_back(h.b2[i].rows, h.b2[i].cols);
    }
    return z;
}

}  // namespace

void DistillConfig::validate() const {
    if (!(real_cfg > 0.0)) throw ConfigError("real-score guidance weight must be positive");
    if (!(lambda_d >= 0.0)) throw ConfigError("critic smoothness weight must be nonnegative");
    if (!(sigma_d >= 0.0)) throw ConfigError("critic perturbation scale must be nonnegative");
    if (!(w_g >= 0.0) || !(w_d >= 0.0)) throw ConfigError("objective mix weights must be nonnegative");
    if (ttur_ratio < 1) throw ConfigError("update ratio must be at least 1");
    if (!(beta_a0 >= 1.0)) throw ConfigError("initial Beta shape must be at least 1");
    if (beta_total_steps < 1) throw ConfigError("noise-curriculum horizon must be positive");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema decay must lie in [0,1)");
    if (ema_start < 0 || gan_start < 0) throw ConfigError("start steps must be nonnegative");
    if (gan_taps.empty()) throw ConfigError("at least one critic tap is required");
    for (std::size_t i = 0; i < gan_taps.size(); i++) {
        if (gan_taps[i] < 0) throw ConfigError("critic tap indices must be nonnegative");
        if (i > 0 && gan_taps[i] <= gan_taps[i - 1]) throw ConfigError("critic taps must be strictly increasing");
    }
    if (gan_head_dim < 1) throw ConfigError("critic head width must be positive");
    if (crop_h < 0 || crop_w < 0) throw ConfigError("crop sizes must be nonnegative");
}

TeacherForcedSample assemble_teacher_forced_sample(const Latent& clip, const MemoryPlan& plan,
                                                   const CorruptionPolicy& policy, Rng& rng,
                                                   std::int64_t section_frames) {
    plan.validate();
    policy.validate();
    if (section_frames < 1) throw ConfigError("section frame count must be positive");
    if (clip.dims.t < section_frames + 1)
        throw DimensionError("clip must provide at least one history frame plus the target section");
    if (clip.dims.h != plan.h || clip.dims.w != plan.w)
        throw DimensionError("clip spatial size must match the memory plan");

    std::int64_t t_hist = clip.dims.t - section_frames;
    LatentDims fd{clip.dims.b, clip.dims.c, 1, clip.dims.h, clip.dims.w};
    std::vector<Latent> stream;
    stream.reserve(static_cast<std::size_t>(t_hist));
    for (std::int64_t t = 0; t < t_hist; t++) {
        Latent f(fd);
        copy_frame(f, 0, clip, t);
        stream.push_back(std::move(f));
    }
    const Latent& first = stream.front();

    TeacherForcedSample out;
    out.history = corrupt_history(build_history(stream, &first, plan), policy, rng);
    out.target = Latent(LatentDims{clip.dims.b, clip.dims.c, section_frames, clip.dims.h, clip.dims.w});
    for (std::int64_t i = 0; i < section_frames; i++) copy_frame(out.target, i, clip, t_hist + i);
    return out;
}

SimTrace staged_backward_simulation(const StudentFn& student, const DLatent& z, const StageSchedule& schedule,
                                    const std::vector<std::int64_t>& steps_per_stage, std::uint64_t seed,
                                    double gamma_renoise) {
    schedule.validate();
    std::int64_t K = schedule.k_stages;
    if (static_cast<std::int64_t>(steps_per_stage.size()) != K)
        throw ConfigError("per-stage step counts must cover every stage");
    for (std::int64_t n : steps_per_stage)
        if (n < 1) throw ConfigError("per-stage step counts must be positive");

    SimTrace tr;
    tr.stage_lambdas.resize(static_cast<std::size_t>(K));
    tr.stage_start.reserve(static_cast<std::size_t>(K));
    tr.stage_x0.reserve(static_cast<std::size_t>(K));

    SamplerState st;
    st.x = z;
    st.stage = 1;
    Rng transition_rng(seed ^ 0x9e3779b97f4a7c15ull);

    for (std::int64_t k = 1; k <= K; k++) {
        if (k > 1) {
            double gamma = gamma_renoise;
            if (gamma < 0.0) gamma = renoise_gamma(1.0, population_variance(st.x));
            stage_transition(st, k, transition_rng, gamma);
        }
        tr.stage_start.push_back(st.x);

        std::int64_t m = steps_per_stage[static_cast<std::size_t>(k - 1)];
        double t_hi = schedule.boundaries[static_cast<std::size_t>(k - 1)];
        double t_lo = schedule.boundaries[static_cast<std::size_t>(k)];
        std::vector<double> lam(static_cast<std::size_t>(m));
        for (std::int64_t i = 0; i < m; i++) {
            double t = t_hi + (t_lo - t_hi) * static_cast<double>(i) / static_cast<double>(m);
            lam[static_cast<std::size_t>(i)] = lambda_of_timestep(t, k, schedule);
        }
        tr.stage_lambdas[static_cast<std::size_t>(k - 1)] = lam;

        const DLatent& s0 = tr.stage_start.back();
        DLatent x0;
        for (std::int64_t i = 0; i < m; i++) {
            double l = lam[static_cast<std::size_t>(i)];
            DLatent u = student(st.x, l, k);
            if (!(u.dims == st.x.dims)) throw DimensionError("student velocity dims do not match the state");
            tr.calls.push_back({l, k});
            x0 = st.x;
            for (std::size_t j = 0; j < x0.data.size(); j++) x0.data[j] -= l * u.data[j];
            if (i + 1 < m) {
                double ln = lam[static_cast<std::size_t>(i + 1)];
                for (std::size_t j = 0; j < st.x.data.size(); j++)
                    st.x.data[j] = (1.0 - ln) * x0.data[j] + ln * s0.data[j];
            } else {
                st.x = x0;
            }
        }
        tr.stage_x0.push_back(std::move(x0));
    }
    return tr;
}

DLatent staged_backward_gradient(const SimTrace& trace, const std::vector<DLatent>& stage_x0_grad,
                                 const StudentVjp& vjp) {
    std::size_t K = trace.stage_x0.size();
    if (K == 0 || trace.stage_lambdas.size() != K || trace.stage_start.size() != K)
        throw DimensionError("simulation trace is incomplete");
    if (stage_x0_grad.size() != K) throw DimensionError("per-stage gradient list must cover every stage");

    std::vector<std::size_t> offset(K);
    std::size_t acc = 0;
    for (std::size_t k = 0; k < K; k++) {
        offset[k] = acc;
        acc += trace.stage_lambdas[k].size();
    }
    if (acc != trace.calls.size()) throw DimensionError("trace call count does not match its grids");

    // The transition correction scale is treated as a constant, which is exact
    // for a fixed gamma; the variance-matching mode adds a small untracked term.
    DLatent pending;
    for (std::size_t kk = K; kk-- > 0;) {
        const std::vector<double>& lam = trace.stage_lambdas[kk];
        const DLatent& x0k = trace.stage_x0[kk];

        DLatent g_x0(x0k.dims);
        if (!pending.data.empty()) {
            if (!(pending.dims == x0k.dims)) throw DimensionError("stage gradient dims do not chain");
            g_x0 = pending;
        }
        const DLatent& ext = stage_x0_grad[kk];
        if (!ext.data.empty()) {
            if (!(ext.dims == x0k.dims)) throw DimensionError("external stage gradient dims do not match");
            for (std::size_t j = 0; j < g_x0.data.size(); j++) g_x0.data[j] += ext.data[j];
        }

        DLatent g_s(trace.stage_start[kk].dims);
        for (std::size_t i = lam.size(); i-- > 0;) {
            double l = lam[i];
            DLatent g_x = g_x0;
            DLatent g_u(g_x0.dims);
            for (std::size_t j = 0; j < g_u.data.size(); j++) g_u.data[j] = -l * g_x0.data[j];
            DLatent via = vjp(offset[kk] + i, g_u);
            if (!(via.dims == g_x.dims)) throw DimensionError("vjp result dims do not match the state");
            for (std::size_t j = 0; j < g_x.data.size(); j++) g_x.data[j] += via.data[j];
            if (i > 0) {
                for (std::size_t j = 0; j < g_x.data.size(); j++) {
                    g_x0.data[j] = (1.0 - l) * g_x.data[j];
                    g_s.data[j] += l * g_x.data[j];
                }
            } else {
                for (std::size_t j = 0; j < g_x.data.size(); j++) g_s.data[j] += g_x.data[j];
            }
        }
        if (kk == 0) return g_s;
        pending = sumpool2(g_s);
    }
    throw NumericError("unreachable");
}

double beta_schedule_a(std::int64_t step, const DistillConfig& cfg) {
    double frac = static_cast<double>(std::max<std::int64_t>(step, 0)) / static_cast<double>(cfg.beta_total_steps);
    frac = std::min(frac, 1.0);
    return 1.0 + (cfg.beta_a0 - 1.0) * (1.0 + std::cos(kPi * frac)) / 2.0;
}

double dynamic_renoise(std::int64_t step, const DistillConfig& cfg, Rng& rng) {
    return rng.beta_a1(beta_schedule_a(step, cfg));
}

DmdSignal dmd_generator_grad(const DLatent& x0, const ScoreFn& real_score, const ScoreFn& fake_score, double cfg_w,
                             double tau, Rng& rng) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("noise level must lie in [0,1]");
    DmdSignal sig;
    sig.tau = tau;
    sig.x_tau = DLatent(x0.dims);
    for (std::size_t j = 0; j < sig.x_tau.data.size(); j++)
        sig.x_tau.data[j] = (1.0 - tau) * x0.data[j] + tau * rng.normal();

    DLatent u_real = real_score(sig.x_tau, tau, true);
    if (!(u_real.dims == x0.dims)) throw DimensionError("real-score dims do not match the sample");
    if (cfg_w != 1.0) {
        DLatent u_unc = real_score(sig.x_tau, tau, false);
        u_real = cfg_combine(u_real, u_unc, cfg_w);
    }
    DLatent u_fake = fake_score(sig.x_tau, tau, true);
    if (!(u_fake.dims == x0.dims)) throw DimensionError("fake-score dims do not match the sample");

    sig.raw = DLatent(x0.dims);
    double mean_abs = 0.0;
    for (std::size_t j = 0; j < sig.raw.data.size(); j++) {
        double x0_real = sig.x_tau.data[j] - tau * u_real.data[j];
        double x0_fake = sig.x_tau.data[j] - tau * u_fake.data[j];
        sig.raw.data[j] = x0_fake - x0_real;
        mean_abs += std::abs(sig.raw.data[j]);
    }
    mean_abs /= static_cast<double>(sig.raw.data.size());
    sig.norm_scale = mean_abs > 0.0 ? mean_abs : 1.0;

    sig.grad = DLatent(x0.dims);
    for (std::size_t j = 0; j < sig.grad.data.size(); j++)
        sig.grad.data[j] = (1.0 - tau) * sig.raw.data[j] / sig.norm_scale;
    return sig;
}

void GanHeads::validate() const {
    if (taps.empty()) throw ConfigError("critic needs at least one tap");
    for (std::size_t i = 0; i < taps.size(); i++) {
        if (taps[i] < 0) throw ConfigError("critic tap indices must be nonnegative");
        if (i > 0 && taps[i] <= taps[i - 1]) throw ConfigError("critic taps must be strictly increasing");
    }
    if (w1.size() != taps.size() || b1.size() != taps.size() || w2.size() != taps.size() || b2.size() != taps.size())
        throw DimensionError("critic parameter lists must have one entry per tap");
    for (std::size_t i = 0; i < taps.size(); i++) {
        if (w1[i].cols != b1[i].cols || b1[i].rows != 1) throw DimensionError("critic hidden bias shape mismatch");
        if (w2[i].rows != w1[i].cols || w2[i].cols != 1) throw DimensionError("critic output weight shape mismatch");
        if (b2[i].rows != 1 || b2[i].cols != 1) throw DimensionError("critic output bias shape mismatch");
    }
}

GanHeads make_gan_heads(std::int64_t d_model, const std::vector<std::int64_t>& taps, std::int64_t head_dim,
                        Rng& rng) {
    if (d_model < 1 || head_dim < 1) throw ConfigError("critic head sizes must be positive");
    GanHeads h;
    h.taps = taps;
    double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (std::size_t i = 0; i < taps.size(); i++) {
        DMat w = randn_mat(d_model, head_dim, rng);
        scale_inplace(w, scale);
        h.w1.push_back(std::move(w));
        h.b1.emplace_back(1, head_dim);
        // zero output layer: a fresh critic starts exactly at the indifferent point
        h.w2.emplace_back(head_dim, 1);
        h.b2.emplace_back(1, 1);
    }
    h.validate();
    return h;
}

std::vector<DMat*> gan_param_ptrs(GanHeads& h) {
    std::vector<DMat*> v;
    for (std::size_t i = 0; i < h.taps.size(); i++) {
        v.push_back(&h.w1[i]);
        v.push_back(&h.b1[i]);
        v.push_back(&h.w2[i]);
        v.push_back(&h.b2[i]);
    }
    return v;
}

std::vector<const DMat*> gan_param_ptrs(const GanHeads& h) {
    std::vector<const DMat*> v;
    for (std::size_t i = 0; i < h.taps.size(); i++) {
        v.push_back(&h.w1[i]);
        v.push_back(&h.b1[i]);
        v.push_back(&h.w2[i]);
        v.push_back(&h.b2[i]);
    }
    return v;
}

DMat gan_head_logits(const GanHeads& h, std::size_t tap_i, const DMat& acts) {
    if (tap_i >= h.taps.size()) throw ConfigError("critic tap index out of range");
    return head_forward(h, tap_i, acts).logits;
}

GanEval gan_losses_on_taps(const GanHeads& heads, const std::vector<DMat>& real_taps,
                           const std::vector<DMat>& real_pert_taps, const std::vector<DMat>& fake_taps,
                           const DistillConfig& cfg) {
    heads.validate();
    std::size_t T = heads.taps.size();
    if (real_taps.size() != T || real_pert_taps.size() != T || fake_taps.size() != T)
        throw DimensionError("critic needs one activation matrix per tap and stream");

    GanEval ev;
    ev.head_grads = zero_heads_like(heads);
    ev.d_real_taps.resize(T);
    ev.d_pert_taps.resize(T);
    ev.d_fake_taps.resize(T);
    ev.d_fake_taps_g.resize(T);

    double inv_t = 1.0 / static_cast<double>(T);
    double cls = 0.0, ar1 = 0.0, lg = 0.0;

    for (std::size_t i = 0; i < T; i++) {
        const DMat& ar = real_taps[i];
        const DMat& ap = real_pert_taps[i];
        const DMat& af = fake_taps[i];
        if (ar.rows != ap.rows || ar.cols != ap.cols)
            throw DimensionError("perturbed real activations must match the real shape");

        HeadCache cr = head_forward(heads, i, ar);
        HeadCache cp = head_forward(heads, i, ap);
        HeadCache cf = head_forward(heads, i, af);
        double lr = cr.logits.a[0], lp = cp.logits.a[0], lf = cf.logits.a[0];

        cls += inv_t * (softplus(-lr) + softplus(lf));
        double diff = lr - lp;
        ar1 += diff * diff;
        lg += inv_t * softplus(-lf);

        double dlr = -inv_t * sigmoid(-lr) + cfg.lambda_d * 2.0 * diff;
        double dlp = -cfg.lambda_d * 2.0 * diff;
        double dlf = inv_t * sigmoid(lf);
        double dlf_g = -inv_t * sigmoid(-lf);

        ev.d_real_taps[i] = head_backward(heads, i, ar, cr, dlr, &ev.head_grads);
        ev.d_pert_taps[i] = head_backward(heads, i, ap, cp, dlp, &ev.head_grads);
        ev.d_fake_taps[i] = head_backward(heads, i, af, cf, dlf, &ev.head_grads);
        ev.d_fake_taps_g[i] = head_backward(heads, i, af, cf, dlf_g, nullptr);
    }

    ev.ar1 = ar1;
    ev.loss_d = cls + cfg.lambda_d * ar1;
    ev.loss_g = lg;
    return ev;
}

GanEval gan_losses(const GanHeads& heads, const Latent& real, const Latent& fake, double tau,
                   const DistillConfig& cfg, Rng& rng) {
    if (!heads.features) throw ConfigError("critic feature hook is not set");
    if (!(real.dims == fake.dims)) throw DimensionError("critic inputs must share dims");
    Latent pert = real;
    if (cfg.sigma_d != 0.0)
        for (float& v : pert.data) v += static_cast<float>(cfg.sigma_d * rng.normal());
    std::vector<DMat> tr = heads.features(real, tau);
    std::vector<DMat> tp = heads.features(pert, tau);
    std::vector<DMat> tf = heads.features(fake, tau);
    return gan_losses_on_taps(heads, tr, tp, tf, cfg);
}

double gan_generator_loss(const GanHeads& heads, const std::vector<DMat>& fake_taps,
                          std::vector<DMat>& d_fake_taps) {
    heads.validate();
    std::size_t T = heads.taps.size();
    if (fake_taps.size() != T) throw DimensionError("critic needs one activation matrix per tap");
    d_fake_taps.assign(T, DMat());
    double inv_t = 1.0 / static_cast<double>(T);
    double lg = 0.0;
    for (std::size_t i = 0; i < T; i++) {
        const DMat& af = fake_taps[i];
        HeadCache cf = head_forward(heads, i, af);
        double lf = cf.logits.a[0];
        lg += inv_t * softplus(-lf);
        d_fake_taps[i] = head_backward(heads, i, af, cf, -inv_t * sigmoid(-lf), nullptr);
    }
    return lg;
}

Latent crop_at(const Latent& x, std::int64_t y0, std::int64_t x0, std::int64_t crop_h, std::int64_t crop_w) {
    if (crop_h < 1 || crop_w < 1) throw DimensionError("crop sizes must be positive");
    if (y0 < 0 || x0 < 0 || y0 + crop_h > x.dims.h || x0 + crop_w > x.dims.w)
        throw DimensionError("crop window exceeds the input");
    Latent out(LatentDims{x.dims.b, x.dims.c, x.dims.t, crop_h, crop_w});
    for (std::int64_t b = 0; b < x.dims.b; b++)
        for (std::int64_t c = 0; c < x.dims.c; c++)
            for (std::int64_t t = 0; t < x.dims.t; t++)
                for (std::int64_t y = 0; y < crop_h; y++)
                    for (std::int64_t xx = 0; xx < crop_w; xx++)
                        out.at(b, c, t, y, xx) = x.at(b, c, t, y0 + y, x0 + xx);
    return out;
}

Latent random_crop(const Latent& x, std::int64_t crop_h, std::int64_t crop_w, Rng& rng) {
    if (crop_h < 1 || crop_w < 1 || crop_h > x.dims.h || crop_w > x.dims.w)
        throw DimensionError("crop sizes must fit the input");
    std::int64_t y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(x.dims.h - crop_h + 1)));
    std::int64_t x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(x.dims.w - crop_w + 1)));
    return crop_at(x, y0, x0, crop_h, crop_w);
}

TturPhase ttur_step(std::int64_t step, std::int64_t ratio) {
    if (step < 0) throw ConfigError("step index must be nonnegative");
    if (ratio < 1) throw ConfigError("update ratio must be at least 1");
    return (step % (ratio + 1)) < ratio ? TturPhase::UpdateFake : TturPhase::UpdateGenerator;
}

std::vector<OdePair> generate_ode_pairs(const SectionModel& teacher,
                                        const std::function<HistoryContext(std::uint64_t)>& history_for,
                                        const PromptEmbedding& text, const StageSchedule& schedule,
                                        const std::vector<std::uint64_t>& seeds, double cfg_scale,
                                        std::int64_t section_frames, const std::string& out_dir) {
    std::ofstream manifest;
    if (!out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
        manifest.open(out_dir + "/manifest.tsv");
        if (!manifest) throw IoError("cannot write " + out_dir + "/manifest.tsv");
        manifest << "file\tseed\tstage\trole\n";
    }

    std::vector<OdePair> out;
    out.reserve(seeds.size());
    for (std::uint64_t seed : seeds) {
        OdePair p;
        p.seed = seed;
        p.history = history_for(seed);
        SectionTrace tr;
        sample_section(teacher, p.history, text, schedule, seed, cfg_scale, section_frames, -1.0, &tr);
        p.z = tr.z;
        p.stage_x.reserve(tr.stage_x.size());
        for (const DLatent& sx : tr.stage_x) p.stage_x.push_back(narrow(sx));

        if (!out_dir.empty()) {
            std::string base = "pair" + std::to_string(seed);
            std::string noise_file = base + "_noise.hlat";
            write_latent(out_dir + "/" + noise_file, narrow(p.z));
            manifest << noise_file << "\t" << seed << "\t1\tnoise\n";
            std::string hist_file = base + "_history.hlat";
            write_latent(out_dir + "/" + hist_file, p.history.frames);
            manifest << hist_file << "\t" << seed << "\t0\thistory\n";
            for (std::size_t k = 0; k < p.stage_x.size(); k++) {
                std::string f = base + "_stage" + std::to_string(k + 1) + ".hlat";
                write_latent(out_dir + "/" + f, p.stage_x[k]);
                manifest << f << "\t" << seed << "\t" << (k + 1) << "\tsolution\n";
            }
        }
        out.push_back(std::move(p));
    }
    if (manifest.is_open() && !manifest.good()) throw IoError("manifest write failed in " + out_dir);
    return out;
}

void ema_update(const DitParams& params, DitParams& ema, double decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema decay must lie in [0,1)");
    std::vector<const DMat*> ps = param_ptrs(params);
    std::vector<DMat*> es = param_ptrs(ema);
    if (ps.size() != es.size()) throw DimensionError("ema parameter sets differ in tensor count");
    for (std::size_t i = 0; i < ps.size(); i++) {
        if (ps[i]->rows != es[i]->rows || ps[i]->cols != es[i]->cols)
            throw DimensionError("ema parameter sets differ in shape");
        for (std::size_t j = 0; j < es[i]->a.size(); j++)
            es[i]->a[j] = decay * es[i]->a[j] + (1.0 - decay) * ps[i]->a[j];
    }
}

double reward_weighted_dmd(double dmd_loss, double reward, double beta) {
    if (!(beta > 0.0)) throw ConfigError("reward temperature must be positive");
    return dmd_loss * std::exp(reward / beta);
}

void DistillRunConfig::validate() const {
    arch.validate();
    plan.validate();
    schedule.validate();
    distill.validate();
    policy.validate();
    ode_opt.validate();
    gen_opt.validate();
    fake_opt.validate();
    if (static_cast<std::int64_t>(student_steps.size()) != schedule.k_stages)
        throw ConfigError("few-step counts must cover every stage");
    for (std::int64_t n : student_steps)
        if (n < 1) throw ConfigError("few-step counts must be positive");
    if (section_frames < 1) throw ConfigError("section frame count must be positive");
    if (!(teacher_cfg > 0.0)) throw ConfigError("teacher guidance weight must be positive");
    if (ode_init_steps < 0) throw ConfigError("regression warmup length must be nonnegative");
    for (std::int64_t tap : distill.gan_taps)
        if (tap >= arch.n_layers) throw ConfigError("critic tap index exceeds the trunk depth");
    std::int64_t ch = distill.crop_h > 0 ? distill.crop_h : plan.h / 2;
    std::int64_t cw = distill.crop_w > 0 ? distill.crop_w : plan.w / 2;
    if (ch < 1 || cw < 1 || ch > plan.h || cw > plan.w) throw ConfigError("critic crop does not fit the frame");
    if (ch % arch.noisy_kernel.h != 0 || cw % arch.noisy_kernel.w != 0)
        throw ConfigError("critic crop must be divisible by the patch kernel");
    if (section_frames % arch.noisy_kernel.t != 0)
        throw ConfigError("section frames must be divisible by the patch kernel");
}

namespace {

DistillRunConfig validated(DistillRunConfig c) {
    c.validate();
    return c;
}

GanHeads heads_for(const DistillRunConfig& c, std::uint64_t seed) {
    Rng r(splitmix64_at(seed, 0xD15C));
    return make_gan_heads(c.arch.d_model, c.distill.gan_taps, c.distill.gan_head_dim, r);
}

// Noisy-row activations of the trunk record at each tap layer.
std::vector<DMat> taps_from_record(const DitRecord& rec, const DitConfig& arch,
                                   const std::vector<std::int64_t>& taps) {
    std::int64_t n_noisy = (rec.noisy_dims.t / arch.noisy_kernel.t) * (rec.noisy_dims.h / arch.noisy_kernel.h) *
                           (rec.noisy_dims.w / arch.noisy_kernel.w);
    std::vector<DMat> out;
    out.reserve(taps.size());
    for (std::int64_t tap : taps) {
        const DMat& full = rec.layer_output(0, tap);
        DMat a(n_noisy, full.cols);
        for (std::int64_t r = 0; r < n_noisy; r++)
            std::copy(full.row(r), full.row(r) + full.cols, a.row(r));
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace

DistillRun::DistillRun(const DitParams& teacher, DistillRunConfig cfg, const PromptEmbedding& text,
                       std::uint64_t seed)
    : cfg_(validated(std::move(cfg))),
      teacher_(teacher),
      gen_(teacher),
      fake_(teacher),
      ema_(teacher),
      heads_(heads_for(cfg_, seed)),
      text_(text),
      gen_adamw_(param_ptrs(gen_), cfg_.ode_init_steps > 0 ? cfg_.ode_opt : cfg_.gen_opt),
      fake_adamw_(param_ptrs(fake_), cfg_.fake_opt),
      head_adamw_(gan_param_ptrs(heads_), cfg_.fake_opt),
      rng_(seed) {}

void DistillRun::add_ode_pairs(std::vector<OdePair> pairs) {
    for (const OdePair& p : pairs)
        if (static_cast<std::int64_t>(p.stage_x.size()) != cfg_.schedule.k_stages)
            throw DimensionError("solution pair must provide one terminal per stage");
    for (OdePair& p : pairs) pairs_.push_back(std::move(p));
}

DistillRun::StepLog DistillRun::step(const Latent& clip) {
    std::int64_t s = step_counter_++;
    if (s < cfg_.ode_init_steps && !pairs_.empty()) return ode_init_step(s);
    if (!matching_started_) {
        matching_started_ = true;
        // the warmup is a separate training stage with its own optimizer
        // settings; its stale second moments would inflate the first
        // matching-phase updates
        if (cfg_.ode_init_steps > 0) gen_adamw_ = AdamW(param_ptrs(gen_), cfg_.gen_opt);
    }
    Rng data_rng = rng_.fork(0x10000 + static_cast<std::uint64_t>(s));
    TeacherForcedSample sample =
        assemble_teacher_forced_sample(clip, cfg_.plan, cfg_.policy, data_rng, cfg_.section_frames);
    TturPhase ph = ttur_step(ttur_counter_++, cfg_.distill.ttur_ratio);
    return ph == TturPhase::UpdateFake ? fake_step(s, sample) : generator_step(s, sample);
}

DistillRun::StepLog DistillRun::ode_init_step(std::int64_t s) {
    const OdePair& p = pairs_[static_cast<std::size_t>(s) % pairs_.size()];
    std::vector<DitRecord> recs;
    StudentFn student = [&](const DLatent& x, double lambda, std::int64_t stage) {
        recs.emplace_back();
        return dit_forward(gen_, x, p.history, text_, lambda, stage, &recs.back());
    };
    SimTrace tr = staged_backward_simulation(student, p.z, cfg_.schedule, cfg_.student_steps, p.seed, -1.0);

    std::size_t K = static_cast<std::size_t>(cfg_.schedule.k_stages);
    double total = 0.0;
    std::vector<DLatent> sg(K);
    for (std::size_t k = 0; k < K; k++) {
        DLatent tgt = widen(p.stage_x[k]);
        total += flow_loss(tr.stage_x0[k], tgt);
        sg[k] = flow_loss_grad(tr.stage_x0[k], tgt);
    }

    DitParams grads = zeros_like(gen_);
    StudentVjp vjp = [&](std::size_t idx, const DLatent& gu) {
        return dit_backward(gen_, recs[idx], p.history, text_, gu, grads, nullptr);
    };
    staged_backward_gradient(tr, sg, vjp);
    gen_adamw_.step(param_ptrs(static_cast<const DitParams&>(grads)));
    gen_updates_++;
    if (s >= cfg_.distill.ema_start) ema_update(gen_, ema_, cfg_.distill.ema_decay);
    return StepLog{s, "ode_init", total, 0.0};
}

DistillRun::StepLog DistillRun::generator_step(std::int64_t s, const TeacherForcedSample& sample) {
    const HistoryContext& hist = sample.history;
    std::int64_t K = cfg_.schedule.k_stages;
    DMat zero_text(text_.rows, text_.cols);

    std::vector<DitRecord> recs;
    StudentFn student = [&](const DLatent& x, double lambda, std::int64_t stage) {
        recs.emplace_back();
        return dit_forward(gen_, x, hist, text_, lambda, stage, &recs.back());
    };
    std::uint64_t zseed = rng_.fork(0x20000 + static_cast<std::uint64_t>(s)).next_u64();
    std::int64_t div = cfg_.schedule.divisor(1);
    LatentDims zd{hist.frames.dims.b, hist.frames.dims.c, cfg_.section_frames, cfg_.plan.h / div,
                  cfg_.plan.w / div};
    DLatent z = widen(seeded_gaussian(zd, zseed));
    SimTrace tr = staged_backward_simulation(student, z, cfg_.schedule, cfg_.student_steps, zseed, -1.0);
    const DLatent& x0 = tr.x0_final();

    Rng step_rng = rng_.fork(0x30000 + static_cast<std::uint64_t>(s));
    double tau = dynamic_renoise(s, cfg_.distill, step_rng);

    ScoreFn real_fn = [&](const DLatent& x, double t, bool cond) {
        return dit_forward(teacher_, x, hist, cond ? text_ : zero_text, t, K, nullptr);
    };
    ScoreFn fake_fn = [&](const DLatent& x, double t, bool) {
        return dit_forward(fake_, x, hist, text_, t, K, nullptr);
    };
    DmdSignal sig = dmd_generator_grad(x0, real_fn, fake_fn, cfg_.distill.real_cfg, tau, step_rng);

    DLatent g_x0 = sig.grad;
    double dmd_mag = 0.0;
    for (double v : sig.raw.data) dmd_mag += v * v;
    dmd_mag /= static_cast<double>(sig.raw.data.size());

    double gan_g = 0.0;
    if (s >= cfg_.distill.gan_start) {
        std::int64_t ch = cfg_.distill.crop_h > 0 ? cfg_.distill.crop_h : cfg_.plan.h / 2;
        std::int64_t cw = cfg_.distill.crop_w > 0 ? cfg_.distill.crop_w : cfg_.plan.w / 2;
        Latent xtau = narrow(sig.x_tau);
        std::int64_t oy = static_cast<std::int64_t>(step_rng.below(static_cast<std::uint64_t>(xtau.dims.h - ch + 1)));
        std::int64_t ox = static_cast<std::int64_t>(step_rng.below(static_cast<std::uint64_t>(xtau.dims.w - cw + 1)));
        Latent fake_crop = crop_at(xtau, oy, ox, ch, cw);

        DitRecord fr;
        dit_forward(fake_, widen(fake_crop), hist, text_, tau, K, &fr);
        std::vector<DMat> fake_taps = taps_from_record(fr, cfg_.arch, cfg_.distill.gan_taps);
        std::vector<DMat> d_taps;
        gan_g = gan_generator_loss(heads_, fake_taps, d_taps);

        TapGrads tg;
        tg.per_item.resize(1);
        for (std::size_t i = 0; i < cfg_.distill.gan_taps.size(); i++)
            tg.per_item[0][cfg_.distill.gan_taps[i]] = d_taps[i];
        DitParams discard = zeros_like(fake_);
        DLatent zero_go(LatentDims{zd.b, zd.c, cfg_.section_frames, ch, cw});
        DLatent d_crop = dit_backward(fake_, fr, hist, text_, zero_go, discard, &tg);

        double wg = cfg_.distill.w_g * (1.0 - tau);
        for (std::int64_t b = 0; b < d_crop.dims.b; b++)
            for (std::int64_t c = 0; c < d_crop.dims.c; c++)
                for (std::int64_t t = 0; t < d_crop.dims.t; t++)
                    for (std::int64_t y = 0; y < ch; y++)
                        for (std::int64_t xx = 0; xx < cw; xx++)
                            g_x0.at(b, c, t, oy + y, ox + xx) += wg * d_crop.at(b, c, t, y, xx);
    }

    std::vector<DLatent> sg(static_cast<std::size_t>(K));
    if (cfg_.dmd_multiscale) {
        for (std::int64_t k = 1; k < K; k++) {
            ScoreFn real_k = [&, k](const DLatent& x, double t, bool cond) {
                return dit_forward(teacher_, x, hist, cond ? text_ : zero_text, t, k, nullptr);
            };
            ScoreFn fake_k = [&, k](const DLatent& x, double t, bool) {
                return dit_forward(fake_, x, hist, text_, t, k, nullptr);
            };
            DmdSignal sk =
                dmd_generator_grad(tr.stage_x0[static_cast<std::size_t>(k - 1)], real_k, fake_k,
                                   cfg_.distill.real_cfg, tau, step_rng);
            sg[static_cast<std::size_t>(k - 1)] = std::move(sk.grad);
        }
    }
    sg[static_cast<std::size_t>(K - 1)] = std::move(g_x0);
    DitParams grads = zeros_like(gen_);
    StudentVjp vjp = [&](std::size_t idx, const DLatent& gu) {
        return dit_backward(gen_, recs[idx], hist, text_, gu, grads, nullptr);
    };
    staged_backward_gradient(tr, sg, vjp);
    gen_adamw_.step(param_ptrs(static_cast<const DitParams&>(grads)));
    gen_updates_++;
    if (s >= cfg_.distill.ema_start) ema_update(gen_, ema_, cfg_.distill.ema_decay);
    return StepLog{s, "generator", dmd_mag, gan_g};
}

DistillRun::StepLog DistillRun::fake_step(std::int64_t s, const TeacherForcedSample& sample) {
    const HistoryContext& hist = sample.history;
    std::int64_t K = cfg_.schedule.k_stages;

    // detached generator rollout: constant data for the estimator update
    StudentFn plain = [&](const DLatent& x, double lambda, std::int64_t stage) {
        return dit_forward(gen_, x, hist, text_, lambda, stage, nullptr);
    };
    std::uint64_t zseed = rng_.fork(0x50000 + static_cast<std::uint64_t>(s)).next_u64();
    std::int64_t div = cfg_.schedule.divisor(1);
    LatentDims zd{hist.frames.dims.b, hist.frames.dims.c, cfg_.section_frames, cfg_.plan.h / div,
                  cfg_.plan.w / div};
    DLatent z = widen(seeded_gaussian(zd, zseed));
    DLatent x0 = staged_backward_simulation(plain, z, cfg_.schedule, cfg_.student_steps, zseed, -1.0).x0_final();

    Rng step_rng = rng_.fork(0x40000 + static_cast<std::uint64_t>(s));
    double tau = dynamic_renoise(s, cfg_.distill, step_rng);

    DLatent eps(x0.dims), x_tau(x0.dims), u_star(x0.dims);
    for (std::size_t j = 0; j < eps.data.size(); j++) {
        eps.data[j] = step_rng.normal();
        x_tau.data[j] = (1.0 - tau) * x0.data[j] + tau * eps.data[j];
        u_star.data[j] = eps.data[j] - x0.data[j];
    }

    DitRecord rec_flow;
    DLatent u_pred = dit_forward(fake_, x_tau, hist, text_, tau, K, &rec_flow);
    double lflow = flow_loss(u_pred, u_star);
    DLatent dflow = flow_loss_grad(u_pred, u_star);
    DitParams grads = zeros_like(fake_);
    dit_backward(fake_, rec_flow, hist, text_, dflow, grads, nullptr);

    double loss_d = 0.0;
    if (s >= cfg_.distill.gan_start) {
        std::int64_t ch = cfg_.distill.crop_h > 0 ? cfg_.distill.crop_h : cfg_.plan.h / 2;
        std::int64_t cw = cfg_.distill.crop_w > 0 ? cfg_.distill.crop_w : cfg_.plan.w / 2;

        Latent xtau_fake = narrow(x_tau);
        Latent fake_crop = random_crop(xtau_fake, ch, cw, step_rng);
        Latent real_base = random_crop(sample.target, ch, cw, step_rng);
        Latent real_crop(real_base.dims);
        for (std::size_t j = 0; j < real_crop.data.size(); j++)
            real_crop.data[j] = static_cast<float>((1.0 - tau) * static_cast<double>(real_base.data[j]) +
                                                   tau * step_rng.normal());

        std::vector<DitRecord> frecs;
        frecs.reserve(3);
        heads_.features = [&](const Latent& xin, double t) {
            frecs.emplace_back();
            dit_forward(fake_, widen(xin), hist, text_, t, K, &frecs.back());
            return taps_from_record(frecs.back(), cfg_.arch, cfg_.distill.gan_taps);
        };
        GanEval ev = gan_losses(heads_, real_crop, fake_crop, tau, cfg_.distill, step_rng);
        heads_.features = nullptr;
        loss_d = ev.loss_d;

        const std::vector<DMat>* tap_sets[3] = {&ev.d_real_taps, &ev.d_pert_taps, &ev.d_fake_taps};
        for (int j = 0; j < 3; j++) {
            TapGrads tg;
            tg.per_item.resize(1);
            for (std::size_t i = 0; i < cfg_.distill.gan_taps.size(); i++) {
                DMat g = (*tap_sets[j])[i];
                scale_inplace(g, cfg_.distill.w_d);
                tg.per_item[0][cfg_.distill.gan_taps[i]] = std::move(g);
            }
            DLatent zero_go(LatentDims{zd.b, zd.c, cfg_.section_frames, ch, cw});
            dit_backward(fake_, frecs[static_cast<std::size_t>(j)], hist, text_, zero_go, grads, &tg);
        }

        for (DMat* g : gan_param_ptrs(ev.head_grads)) scale_inplace(*g, cfg_.distill.w_d);
        head_adamw_.step(gan_param_ptrs(static_cast<const GanHeads&>(ev.head_grads)));
    }

    fake_adamw_.step(param_ptrs(static_cast<const DitParams&>(grads)));
    fake_updates_++;
    return StepLog{s, "fake", lflow, loss_d};
}

DLatent DistillRun::student_rollout(const DitParams& params, const HistoryContext& history,
                                    std::uint64_t seed) const {
    std::int64_t div = cfg_.schedule.divisor(1);
    LatentDims zd{history.frames.dims.b, history.frames.dims.c, cfg_.section_frames, cfg_.plan.h / div,
                  cfg_.plan.w / div};
    DLatent z = widen(seeded_gaussian(zd, seed));
    StudentFn f = [&](const DLatent& x, double lambda, std::int64_t stage) {
        return dit_forward(params, x, history, text_, lambda, stage, nullptr);
    };
    return staged_backward_simulation(f, z, cfg_.schedule, cfg_.student_steps, seed, -1.0).x0_final();
}

DLatent DistillRun::rollout(const HistoryContext& history, std::uint64_t seed) const {
    return student_rollout(gen_, history, seed);
}

DLatent DistillRun::reference_rollout(const DitParams& params, const HistoryContext& history,
                                      std::uint64_t seed) const {
    DMat zero_text(text_.rows, text_.cols);
    SectionModel m = [&](const DLatent& x, const HistoryContext& h, const PromptEmbedding& tx, double lambda,
                         std::int64_t stage, bool cond) {
        return dit_forward(params, x, h, cond ? tx : zero_text, lambda, stage, nullptr);
    };
    return widen(sample_section(m, history, text_, cfg_.schedule, seed, cfg_.teacher_cfg, cfg_.section_frames));
}

double endpoint_mse(const DistillRun& run, const DitParams& student, const DitParams& teacher,
                    const std::vector<Latent>& eval_clips, std::uint64_t seed) {
    if (eval_clips.empty()) throw ConfigError("endpoint evaluation needs at least one clip");
    const DistillRunConfig& cfg = run.config();
    CorruptionPolicy clean;
    clean.p_noise = 0.0;
    clean.p_downup = 0.0;
    clean.p_exposure = 0.0;
    clean.p_clean = 1.0;

    double total = 0.0;
    for (std::size_t i = 0; i < eval_clips.size(); i++) {
        Rng r(splitmix64_at(seed, i));
        TeacherForcedSample smp =
            assemble_teacher_forced_sample(eval_clips[i], cfg.plan, clean, r, cfg.section_frames);
        std::uint64_t zs = splitmix64_at(seed ^ 0xE0E0E0E0ull, i);
        DLatent ref = run.reference_rollout(teacher, smp.history, zs);
        DLatent few = run.student_rollout(student, smp.history, zs);
        total += flow_loss(few, ref);
    }
    return total / static_cast<double>(eval_clips.size());
}

}  // namespace latflow
