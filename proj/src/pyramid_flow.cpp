#include "latflow/pyramid_flow.hpp"

#include <cmath>
#include <string>

namespace latflow {

void StageSchedule::validate() const {
    if (k_stages < 1) throw ConfigError("schedule needs at least one stage");
    if (boundaries.size() != static_cast<std::size_t>(k_stages) + 1 ||
        steps.size() != static_cast<std::size_t>(k_stages) || shifts.size() != static_cast<std::size_t>(k_stages))
        throw ConfigError("schedule arrays must have K+1 boundaries and K steps/shifts");
    for (std::size_t i = 0; i + 1 < boundaries.size(); i++)
        if (!(boundaries[i] > boundaries[i + 1])) throw ConfigError("stage boundaries must strictly decrease");
    for (std::int64_t n : steps)
        if (n < 1) throw ConfigError("every stage needs at least one step");
    for (double s : shifts)
        if (!(s > 0.0)) throw ConfigError("shifts must be positive");
}

std::int64_t StageSchedule::total_steps() const {
    std::int64_t n = 0;
    for (std::int64_t s : steps) n += s;
    return n;
}

std::int64_t StageSchedule::divisor(std::int64_t k) const {
    if (k < 1 || k > k_stages) throw ConfigError("stage index out of range");
    return static_cast<std::int64_t>(1) << (k_stages - k);
}

StageSchedule make_schedule(std::int64_t k_stages, std::int64_t total_steps, double base_shift, double t_max) {
    if (k_stages < 1 || total_steps < k_stages) throw ConfigError("need at least one step per stage");
    StageSchedule s;
    s.k_stages = k_stages;
    s.boundaries.resize(static_cast<std::size_t>(k_stages) + 1);
    for (std::int64_t i = 0; i <= k_stages; i++)
        s.boundaries[static_cast<std::size_t>(i)] = t_max * static_cast<double>(k_stages - i) / static_cast<double>(k_stages);
    std::int64_t base = total_steps / k_stages, rem = total_steps % k_stages;
    for (std::int64_t k = 0; k < k_stages; k++) s.steps.push_back(base + (k < rem ? 1 : 0));
    for (std::int64_t k = 1; k <= k_stages; k++) {
        double share = 1.0 / static_cast<double>(s.divisor(k) * s.divisor(k));
        s.shifts.push_back(1.0 + (base_shift - 1.0) * share);
    }
    s.validate();
    return s;
}

Pyramid make_pyramid(const Latent& x, std::int64_t k_stages) {
    if (k_stages < 1) throw ConfigError("pyramid needs at least one level");
    std::int64_t div = static_cast<std::int64_t>(1) << (k_stages - 1);
    if (x.dims.h % div != 0 || x.dims.w % div != 0)
        throw DimensionError("spatial dims " + x.dims.str() + " not divisible by 2^(K-1) = " + std::to_string(div));
    Pyramid p;
    p.levels.assign(static_cast<std::size_t>(k_stages), Latent{});
    p.levels.back() = x;
    for (std::int64_t k = k_stages - 1; k >= 1; k--)
        p.levels[static_cast<std::size_t>(k - 1)] = downsample_area(p.levels[static_cast<std::size_t>(k)], 2);
    return p;
}

namespace {

template <class Tensor>
Tensor path_point_impl(const Tensor& x_k, const Tensor& start_k, double lambda) {
    if (!(x_k.dims == start_k.dims))
        throw DimensionError("path endpoints disagree: " + x_k.dims.str() + " vs " + start_k.dims.str());
    Tensor out(x_k.dims);
    using Elem = std::remove_reference_t<decltype(out.at(0, 0, 0, 0, 0))>;
    double a = 1.0 - lambda;
    for (std::size_t i = 0; i < out.data.size(); i++)
        out.data[i] = static_cast<Elem>(a * x_k.data[i] + lambda * start_k.data[i]);
    return out;
}

template <class Tensor>
Tensor velocity_impl(const Tensor& x_k, const Tensor& start_k) {
    if (!(x_k.dims == start_k.dims))
        throw DimensionError("path endpoints disagree: " + x_k.dims.str() + " vs " + start_k.dims.str());
    Tensor out(x_k.dims);
    for (std::size_t i = 0; i < out.data.size(); i++) out.data[i] = start_k.data[i] - x_k.data[i];
    return out;
}

template <class Tensor>
double loss_impl(const Tensor& u, const Tensor& v) {
    if (!(u.dims == v.dims)) throw DimensionError("flow loss over mismatched dims");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.data.size(); i++) {
        double d = static_cast<double>(u.data[i]) - static_cast<double>(v.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(u.data.size());
}

}  // namespace

Latent sample_path_point(const Latent& x_k, const Latent& start_k, double lambda) {
    return path_point_impl(x_k, start_k, lambda);
}
DLatent sample_path_point(const DLatent& x_k, const DLatent& start_k, double lambda) {
    return path_point_impl(x_k, start_k, lambda);
}

Latent target_velocity(const Latent& x_k, const Latent& start_k) { return velocity_impl(x_k, start_k); }
DLatent target_velocity(const DLatent& x_k, const DLatent& start_k) { return velocity_impl(x_k, start_k); }

double flow_loss(const Latent& u_pred, const Latent& v_star) { return loss_impl(u_pred, v_star); }
double flow_loss(const DLatent& u_pred, const DLatent& v_star) { return loss_impl(u_pred, v_star); }

DLatent flow_loss_grad(const DLatent& u_pred, const DLatent& v_star) {
    if (!(u_pred.dims == v_star.dims)) throw DimensionError("flow loss grad over mismatched dims");
    DLatent g(u_pred.dims);
    double inv = 2.0 / static_cast<double>(g.data.size());
    for (std::size_t i = 0; i < g.data.size(); i++) g.data[i] = inv * (u_pred.data[i] - v_star.data[i]);
    return g;
}

double shift_lambda(double lambda_hat, double s) {
    if (!(s > 0.0)) throw ConfigError("shift must be positive");
    return s * lambda_hat / (1.0 + (s - 1.0) * lambda_hat);
}

double lambda_of_timestep(double t, std::int64_t k, const StageSchedule& sched) {
    sched.validate();
    if (k < 1 || k > sched.k_stages) throw ConfigError("stage index out of range");
    double hi = sched.boundaries[static_cast<std::size_t>(k - 1)];
    double lo = sched.boundaries[static_cast<std::size_t>(k)];
    if (t < lo - 1e-9 || t > hi + 1e-9)
        throw ConfigError("timestep " + std::to_string(t) + " outside stage " + std::to_string(k) + " interval [" +
                          std::to_string(lo) + "," + std::to_string(hi) + "]");
    double lh = (t - lo) / (hi - lo);
    if (lh < 0.0) lh = 0.0;
    if (lh > 1.0) lh = 1.0;
    return shift_lambda(lh, sched.shifts[static_cast<std::size_t>(k - 1)]);
}

}  // namespace latflow
