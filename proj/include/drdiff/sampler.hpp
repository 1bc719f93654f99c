// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "drdiff/diffusion.hpp"
#include "drdiff/numerics.hpp"

namespace drdiff::sampler {

using diffusion::LatentSeq;
using diffusion::NoiseSchedule;

enum class GridKind { UniformT, UniformLogAbar, Trig };
GridKind grid_kind_from_string(const std::string& s);
const char* grid_kind_name(GridKind k);

struct SamplerConfig {
    std::vector<int> timestep_grid;  // strictly decreasing, ends at 0
    int order = 1;                   // 1 or 2

    int steps() const { return static_cast<int>(timestep_grid.size()) - 1; }
    void validate(int max_t) const;
};

/// Timestep grids: UniformT spaces t linearly; UniformLogAbar spaces
/// log(alpha_bar) linearly; Trig spaces arccos(sqrt(alpha_bar)) linearly,
/// which equidistributes the per-step rotation angle. Duplicate timesteps
/// collapse, so the realized step count can be below S for coarse schedules.
std::vector<int> make_grid(const NoiseSchedule& sched, int steps, GridKind kind);

/// Noise predictor; either the trained network or an analytic oracle.
using DenoiserFn = std::function<Mat(const Mat& z, int t)>;

/// Deterministic first-order reverse step:
/// z_to = sqrt(abar_to) * z0_est + sqrt(1 - abar_to) * eps_pred.
/// t_to == t_from returns the input unchanged.
LatentSeq ddim_step(const LatentSeq& zt, const Mat& eps_pred, int t_from, int t_to,
                    const NoiseSchedule& sched);

/// One entry of solver history: a z0 estimate and its timestep.
struct X0History {
    Mat x0;
    int t = 0;
};

/// Second-order multistep update in data-prediction form: extrapolates the z0
/// estimate linearly in lambda = 0.5*log(abar/(1-abar)) to the step midpoint,
/// then applies the ddim reconstruction with the extrapolated estimate.
/// history.back() must correspond to zt.t. Falls back to order 1 with a
/// single history entry and on the final step to t = 0. Throws on empty
/// history.
LatentSeq multistep2_step(const LatentSeq& zt, std::span<const X0History> history, int t_to,
                          const NoiseSchedule& sched);

/// Optional inference-time anchor nudge: at steps crossing an anchor
/// timestep, z moves along -eta * grad ||z - target||^2. Off by default.
struct AnchorGuidance {
    double eta = 0.0;
    diffusion::AnchorSet anchors;
};

/// Runs the configured stepper from z ~ N(0, I) at the grid head down to 0.
Mat sample(const DenoiserFn& denoise, int n, int d, const SamplerConfig& cfg,
           const NoiseSchedule& sched, Rng& rng,
           const AnchorGuidance* guidance = nullptr);

/// The closed-form optimal predictor for unit-Gaussian data,
/// eps_hat(z, t) = sqrt(1 - abar_t) * z. Used by tests and the sweep metric.
DenoiserFn analytic_gaussian_denoiser(const NoiseSchedule& sched);

}  // namespace drdiff::sampler
