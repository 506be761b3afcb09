#pragma once

#include <cstdint>
#include <vector>

#include "latflow/latent.hpp"

namespace latflow {

// Coarse-to-fine stage plan. Stage k (1-based) runs at 1/2^(K-k) of the full
// spatial resolution over the timestep interval [boundaries[k], boundaries[k-1]],
// with boundaries strictly decreasing from T_max to 0.
struct StageSchedule {
    std::int64_t k_stages = 3;
    std::vector<double> boundaries;  // size K+1
    std::vector<std::int64_t> steps;  // N_k per stage, size K
    std::vector<double> shifts;       // s_k per stage, size K

    void validate() const;
    std::int64_t total_steps() const;
    // spatial divisor at stage k: 2^(K-k)
    std::int64_t divisor(std::int64_t k) const;
};

// Equispaced boundaries over [t_max, 0], near-even step split (remainder to the
// earliest stages), and shifts that shrink with each stage's share of the
// finest-stage token count: s_k = 1 + (s_base - 1) / 4^(K-k).
StageSchedule make_schedule(std::int64_t k_stages, std::int64_t total_steps, double base_shift = 3.0,
                            double t_max = 1000.0);

// levels[k-1] is the stage-k target: levels[K-1] is x itself, each coarser
// level an area downsample by 2 of the next.
struct Pyramid {
    std::vector<Latent> levels;
};

Pyramid make_pyramid(const Latent& x, std::int64_t k_stages);

// Blend along the stage path: (1-lambda) * x_k + lambda * start_k, where
// start_k is the upsampled previous level (stage 1: pure noise). lambda = 1 is
// the stage start, lambda = 0 the clean stage target.
Latent sample_path_point(const Latent& x_k, const Latent& start_k, double lambda);
DLatent sample_path_point(const DLatent& x_k, const DLatent& start_k, double lambda);

// Velocity that moves a path point toward the stage start as lambda grows:
// u* = start_k - x_k, the lambda-derivative of the path. Its integral from any
// path point back to lambda = 0 recovers x_k exactly.
Latent target_velocity(const Latent& x_k, const Latent& start_k);
DLatent target_velocity(const DLatent& x_k, const DLatent& start_k);

// Mean squared error with f64 accumulation.
double flow_loss(const Latent& u_pred, const Latent& v_star);
double flow_loss(const DLatent& u_pred, const DLatent& v_star);
// d flow_loss / d u_pred = 2 (u - v) / n
DLatent flow_loss_grad(const DLatent& u_pred, const DLatent& v_star);

// Map an absolute timestep into the stage-local blend: lambda_hat renormalizes
// [T_k, T_{k-1}] to [0,1], then the rational shift s*lh / (1 + (s-1)*lh)
// re-weights it. Boundaries map to themselves for any s > 0.
double lambda_of_timestep(double t, std::int64_t k, const StageSchedule& sched);

double shift_lambda(double lambda_hat, double s);

}  // namespace latflow
