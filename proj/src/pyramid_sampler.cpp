#include "latflow/pyramid_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <type_traits>

namespace latflow {

void pc_step(SamplerState& state, const VelocityEval& u_eval, double t_prev, double t_next) {
    if (!(t_next < t_prev)) throw NumericError("pc_step integrates downward: t_next must be below t_prev");
    double lo = state.t_lo - 1e-9, hi = state.t_hi + 1e-9;
    if (t_prev < lo || t_prev > hi || t_next < lo || t_next > hi)
        throw NumericError("pc_step timestep outside the current stage interval");
    DLatent u = u_eval(state.x, t_prev);
    if (!(u.dims == state.x.dims)) throw DimensionError("velocity dims do not match the state");
    double h = t_next - t_prev;
    if (state.has_prev) {
        double hp = t_prev - state.t_prev;
        if (hp == 0.0) throw NumericError("pc_step called twice at the same timestep");
        // extrapolate u to the interval midpoint from the buffered output
        double c = 0.5 * h / hp;
        for (std::size_t i = 0; i < state.x.data.size(); i++)
            state.x.data[i] += h * (u.data[i] + c * (u.data[i] - state.u_prev.data[i]));
        state.last_update_order = 2;
    } else {
        for (std::size_t i = 0; i < state.x.data.size(); i++) state.x.data[i] += h * u.data[i];
        state.last_update_order = 1;
    }
    state.u_prev = std::move(u);
    state.t_prev = t_prev;
    state.has_prev = true;
    state.step_index++;
}

double renoise_gamma(double sigma_target_sq, double sigma_up_sq) {
    return std::sqrt(std::max(0.0, sigma_target_sq - sigma_up_sq));
}

void stage_transition(SamplerState& state, std::int64_t next_stage, Rng& rng, double gamma_renoise) {
    state.x = upsample_nearest(state.x, 2);
    if (gamma_renoise != 0.0)
        for (auto& v : state.x.data) v += gamma_renoise * rng.normal();
    state.stage = next_stage;
    state.step_index = 0;
    state.has_prev = false;
    state.u_prev = DLatent();
    state.t_prev = 0.0;
    state.last_update_order = 0;
}

namespace {

template <class L>
L cfg_combine_impl(const L& u_cond, const L& u_uncond, double scale) {
    if (!(u_cond.dims == u_uncond.dims)) throw DimensionError("guidance branches must share dims");
    L out(u_cond.dims);
    for (std::size_t i = 0; i < out.data.size(); i++) {
        double c = static_cast<double>(u_cond.data[i]), u = static_cast<double>(u_uncond.data[i]);
        out.data[i] = static_cast<std::remove_reference_t<decltype(out.data[0])>>(u + scale * (c - u));
    }
    return out;
}

double population_variance(const DLatent& x) {
    double mean = 0.0;
    for (double v : x.data) mean += v;
    mean /= static_cast<double>(x.data.size());
    double var = 0.0;
    for (double v : x.data) var += (v - mean) * (v - mean);
    return var / static_cast<double>(x.data.size());
}

}  // namespace

DLatent cfg_combine(const DLatent& u_cond, const DLatent& u_uncond, double scale) {
    return cfg_combine_impl(u_cond, u_uncond, scale);
}

Latent cfg_combine(const Latent& u_cond, const Latent& u_uncond, double scale) {
    return cfg_combine_impl(u_cond, u_uncond, scale);
}

Latent sample_section(const SectionModel& model, const HistoryContext& history, const PromptEmbedding& text,
                      const StageSchedule& schedule, std::uint64_t seed, double cfg_scale,
                      std::int64_t section_frames, double gamma_renoise, SectionTrace* trace) {
    schedule.validate();
    const MemoryPlan& plan = history.plan;
    plan.validate();
    if (section_frames < 1) throw ConfigError("section frame count must be positive");
    std::int64_t K = schedule.k_stages;
    std::int64_t div = schedule.divisor(1);
    if (plan.h % div != 0 || plan.w % div != 0)
        throw DimensionError("spatial size must be divisible by the coarsest stage divisor");

    LatentDims dims{history.frames.dims.b, history.frames.dims.c, section_frames, plan.h / div, plan.w / div};
    SamplerState st;
    st.x = widen(seeded_gaussian(dims, seed));
    st.stage = 1;
    st.t_lo = 0.0;
    st.t_hi = 1.0;
    Rng transition_rng(seed ^ 0x9e3779b97f4a7c15ull);
    if (trace) {
        trace->z = st.x;
        trace->stage_x.clear();
    }

    for (std::int64_t k = 1; k <= K; k++) {
        if (k > 1) {
            double gamma = gamma_renoise;
            if (gamma < 0.0) gamma = renoise_gamma(1.0, population_variance(st.x));
            stage_transition(st, k, transition_rng, gamma);
        }
        VelocityEval eval = [&](const DLatent& x, double lambda) {
            DLatent uc = model(x, history, text, lambda, k, true);
            if (cfg_scale == 1.0) return uc;
            DLatent uu = model(x, history, text, lambda, k, false);
            return cfg_combine(uc, uu, cfg_scale);
        };
        std::int64_t n = schedule.steps[static_cast<std::size_t>(k - 1)];
        double t_hi = schedule.boundaries[static_cast<std::size_t>(k - 1)];
        double t_lo = schedule.boundaries[static_cast<std::size_t>(k)];
        std::vector<double> lam(static_cast<std::size_t>(n + 1));
        for (std::int64_t i = 0; i <= n; i++) {
            double t = t_hi + (t_lo - t_hi) * static_cast<double>(i) / static_cast<double>(n);
            lam[static_cast<std::size_t>(i)] = lambda_of_timestep(t, k, schedule);
        }
        for (std::int64_t i = 0; i < n; i++)
            pc_step(st, eval, lam[static_cast<std::size_t>(i)], lam[static_cast<std::size_t>(i + 1)]);
        if (trace) trace->stage_x.push_back(st.x);
    }

    Latent out = narrow(st.x);
    if (!all_finite(out)) throw NumericError("sampler produced non-finite values");
    return out;
}

void CostModel::validate() const {
    if (layers < 1 || d_model < 1 || batch < 1) throw ConfigError("cost model sizes must be positive");
    Rat zero{0};
    if (!(zero < alpha) || !(zero < beta) || !(zero < gamma_act)) throw ConfigError("cost coefficients must be positive");
}

CostReport cost_report(const StageSchedule& schedule, const MemoryPlan& plan, const CostModel& cm,
                       std::int64_t section_frames) {
    schedule.validate();
    plan.validate();
    cm.validate();
    if (section_frames < 1) throw ConfigError("section frame count must be positive");

    CostReport r;
    r.hist = token_budget(plan);
    const PatchKernel* finep = &plan.kernels[0];
    for (const PatchKernel& k : plan.kernels)
        if (k.volume() < finep->volume()) finep = &k;
    const PatchKernel& fine = *finep;
    r.hist_baseline = Rat(plan.total_frames()) / Rat(fine.t) * (Rat(plan.h) / Rat(fine.h)) * (Rat(plan.w) / Rat(fine.w));
    r.hist_ratio = r.hist_baseline / r.hist.total;
    r.attn_flop_ratio_hist = r.hist_ratio * r.hist_ratio;

    std::int64_t K = schedule.k_stages;
    Rat factor_sum{0};
    for (std::int64_t k = 1; k <= K; k++) factor_sum = factor_sum + Rat(1, std::int64_t{1} << (2 * (K - k)));
    r.noisy_factor = factor_sum / Rat(K);
    r.noisy_ratio = Rat(K) / factor_sum;
    r.noisy_avg_tokens = r.noisy_factor * Rat(section_frames) * Rat(plan.h) * Rat(plan.w);

    Rat D{cm.d_model}, B{cm.batch}, L{cm.layers};
    r.noisy_token_steps = Rat(0);
    r.linear_flops = Rat(0);
    r.attn_flops = Rat(0);
    r.act_flops = Rat(0);
    for (std::int64_t k = 1; k <= K; k++) {
        Rat lk = Rat(section_frames * plan.h * plan.w) / Rat(std::int64_t{1} << (2 * (K - k)));
        Rat steps{schedule.steps[static_cast<std::size_t>(k - 1)]};
        r.noisy_token_steps = r.noisy_token_steps + steps * lk;
        Rat lt = lk + r.hist.total;
        r.linear_flops = r.linear_flops + steps * L * cm.alpha * B * lt * D * D;
        r.attn_flops = r.attn_flops + steps * L * cm.beta * B * lt * lt * D;
        r.act_flops = r.act_flops + steps * L * cm.gamma_act * B * lt * D;
    }
    r.total_flops = r.linear_flops + r.attn_flops + r.act_flops;
    return r;
}

std::string CostReport::str() const {
    std::ostringstream os;
    os << "history tokens      : " << hist.total.str() << " = short " << hist.per_term[0].str() << " + mid "
       << hist.per_term[1].str() << " + long " << hist.per_term[2].str() << "\n";
    os << "baseline tokens     : " << hist_baseline.str() << " (finest kernel on every history frame)\n";
    os << "history token ratio : " << hist_ratio.str() << "\n";
    os << "history attn ratio  : " << attn_flop_ratio_hist.str() << " (quadratic in tokens)\n";
    os << "noisy token factor  : " << noisy_factor.str() << " (" << noisy_factor.to_double() << "), ratio "
       << noisy_ratio.str() << " (" << noisy_ratio.to_double() << ")\n";
    os << "noisy tokens / step : " << noisy_avg_tokens.str() << " on average\n";
    os << "noisy token-steps   : " << noisy_token_steps.str() << " over the full schedule\n";
    os << "flops               : linear " << linear_flops.str() << ", attention " << attn_flops.str()
       << ", activation " << act_flops.str() << ", total " << total_flops.str() << "\n";
    return os.str();
}

}  // namespace latflow
