// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "drdiff/numerics.hpp"

namespace drdiff::diffusion {

enum class ScheduleKind { Linear, Exponential, Cosine, Sqrt };

ScheduleKind schedule_kind_from_string(const std::string& s);  // throws on unknown kind
const char* schedule_kind_name(ScheduleKind k);

/// Noise schedule over T steps. Arrays are indexed t = 0..T with a clean
/// sentinel at 0 (beta[0] = 0, alpha[0] = alpha_bar[0] = 1); real schedule
/// entries live at t = 1..T. alpha_bar is strictly decreasing.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::Sqrt;
    int steps = 0;  // T
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double abar(int t) const { return alpha_bar[t]; }
    void validate() const;  // throws std::logic_error when invariants fail
};

/// Closed forms per kind: linear/exponential space beta over [1e-4, 0.02]
/// (arithmetically / geometrically); cosine uses the squared-cosine alpha_bar
/// curve with offset 0.008; sqrt uses alpha_bar_t = 1 - sqrt(t/T + 1e-4).
/// Betas are clipped into [1e-8, 0.999]. Throws on T < 2.
NoiseSchedule make_schedule(ScheduleKind kind, int steps);

/// Latent sequence with its timestep tag.
struct LatentSeq {
    Mat z;
    int t = 0;
};

/// Anchor timesteps, noised summary targets, and per-anchor loss weights.
struct AnchorSet {
    std::vector<int> timesteps;
    std::vector<Mat> targets;
    std::vector<double> lambdas;

    void validate(int steps) const;
};

/// Closed-form forward mixture sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.
LatentSeq q_sample(const LatentSeq& z0, int t, const Mat& eps, const NoiseSchedule& sched);

/// Single reverse-chain step: sqrt(1 - beta_t) * prev + sqrt(beta_t) * eps.
/// Used by tests to confirm the stepwise chain matches the closed form.
Mat q_step(const Mat& prev, int t, const Mat& eps, const NoiseSchedule& sched);

/// Mean squared error over all entries.
double diffusion_loss(const Mat& eps_true, const Mat& eps_pred);

/// Algebraic inversion (z_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t).
/// Throws "degenerate inversion" when abar_t < 1e-12.
Mat estimate_z0(const LatentSeq& zt, const Mat& eps_pred, const NoiseSchedule& sched);

/// Re-noise the one-step z0 estimate to anchor time t_k with noise eps_prime.
Mat project_to_anchor(const LatentSeq& zt, const Mat& eps_pred, int t_k, const Mat& eps_prime,
                      const NoiseSchedule& sched);

/// Segment-mean summary skeleton: every position holds the mean embedding of
/// its segment. The last segment absorbs the remainder.
Mat summarize(const Mat& z0, int segment_count);

struct BuiltAnchors {
    AnchorSet set;
    std::vector<Mat> eps_prime;  // the noise draw shared with sas_loss
};

/// Targets sqrt(abar_tk) * Summ(z0) + sqrt(1 - abar_tk) * eps_prime for each
/// anchor timestep, with eps_prime drawn from rng and returned for reuse.
BuiltAnchors build_anchor_targets(const LatentSeq& z0, const NoiseSchedule& sched,
                                  const std::vector<int>& timesteps, int segment_count,
                                  const std::vector<double>& lambdas, Rng& rng);

/// Sum over anchors of lambda_k * mean squared entry distance between the
/// projected state and the anchor target. eps_prime[k] must be the same draw
/// used to build target k, so the shared noise cancels exactly.
double sas_loss(const LatentSeq& zt, const Mat& eps_pred, const AnchorSet& anchors,
                std::span<const Mat> eps_prime, const NoiseSchedule& sched);

/// d(sas_loss)/d(eps_pred); the loss is an affine-quadratic in eps_pred.
Mat sas_loss_grad(const LatentSeq& zt, const Mat& eps_pred, const AnchorSet& anchors,
                  std::span<const Mat> eps_prime, const NoiseSchedule& sched);

/// CSV with columns t,beta,alpha,alpha_bar for rows t = 1..T.
void write_schedule_csv(std::ostream& os, const NoiseSchedule& sched);

}  // namespace drdiff::diffusion
