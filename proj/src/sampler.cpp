// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace drdiff::sampler {

GridKind grid_kind_from_string(const std::string& s) {
    if (s == "uniform_t") return GridKind::UniformT;
    if (s == "uniform_log_abar") return GridKind::UniformLogAbar;
    if (s == "trig") return GridKind::Trig;
    throw std::invalid_argument("unknown grid kind: " + s);
}

const char* grid_kind_name(GridKind k) {
    switch (k) {
        case GridKind::UniformT: return "uniform_t";
        case GridKind::UniformLogAbar: return "uniform_log_abar";
        case GridKind::Trig: return "trig";
    }
    return "?";
}

void SamplerConfig::validate(int max_t) const {
    if (order != 1 && order != 2) throw std::invalid_argument("sampler: order must be 1 or 2");
    if (timestep_grid.size() < 2) throw std::invalid_argument("sampler: grid needs >= 2 points");
    if (timestep_grid.back() != 0) throw std::invalid_argument("sampler: grid must end at 0");
    if (timestep_grid.front() > max_t) throw std::invalid_argument("sampler: grid exceeds T");
    for (size_t i = 1; i < timestep_grid.size(); ++i)
        if (timestep_grid[i] >= timestep_grid[i - 1])
            throw std::invalid_argument("sampler: grid must be strictly decreasing");
}

std::vector<int> make_grid(const NoiseSchedule& sched, int steps, GridKind kind) {
    if (steps < 1) throw std::invalid_argument("make_grid: steps must be >= 1");
    const int T = sched.steps;
    std::vector<int> grid;
    grid.reserve(steps + 1);

    auto push = [&](int t) {
        t = std::clamp(t, 0, T);
        if (grid.empty() || t < grid.back()) grid.push_back(t);
    };

    switch (kind) {
        case GridKind::UniformT:
            for (int i = 0; i <= steps; ++i)
                push(static_cast<int>(std::lround(static_cast<double>(T) * (steps - i) / steps)));
            break;
        case GridKind::UniformLogAbar: {
            const double l_end = std::log(sched.abar(T));
            for (int i = 0; i <= steps; ++i) {
                if (i == steps) {
                    push(0);
                    break;
                }
                const double target = l_end * (static_cast<double>(steps - i) / steps);
                // log abar decreases in t; nearest index by binary search
                int lo = 0, hi = T;
                while (hi - lo > 1) {
                    const int mid = (lo + hi) / 2;
                    if (std::log(sched.abar(mid)) > target) lo = mid;
                    else hi = mid;
                }
                const int t = (std::abs(std::log(sched.abar(lo)) - target) <=
                               std::abs(std::log(sched.abar(hi)) - target))
                                  ? lo
                                  : hi;
                push(t);
            }
            break;
        }
        case GridKind::Trig: {
            const double th_end = std::acos(std::sqrt(sched.abar(T)));
            auto theta = [&](int t) { return std::acos(std::sqrt(sched.abar(t))); };
            for (int i = 0; i <= steps; ++i) {
                if (i == steps) {
                    push(0);
                    break;
                }
                const double target = th_end * (static_cast<double>(steps - i) / steps);
                int lo = 0, hi = T;  // theta increases in t
                while (hi - lo > 1) {
                    const int mid = (lo + hi) / 2;
                    if (theta(mid) < target) lo = mid;
                    else hi = mid;
                }
                const int t = (std::abs(theta(lo) - target) <= std::abs(theta(hi) - target)) ? lo : hi;
                push(t);
            }
            break;
        }
    }
    if (grid.empty() || grid.back() != 0) grid.push_back(0);
    return grid;
}

LatentSeq ddim_step(const LatentSeq& zt, const Mat& eps_pred, int t_from, int t_to,
                    const NoiseSchedule& sched) {
    if (t_to > t_from) throw std::invalid_argument("ddim_step: t_to must not exceed t_from");
    if (zt.t != t_from) throw std::invalid_argument("ddim_step: state/timestep mismatch");
    if (t_to == t_from) return zt;
    const Mat z0 = diffusion::estimate_z0(zt, eps_pred, sched);
    const double a = std::sqrt(sched.abar(t_to));
    const double b = std::sqrt(1.0 - sched.abar(t_to));
    LatentSeq out;
    out.t = t_to;
    out.z = Mat(zt.z.rows, zt.z.cols);
    for (size_t i = 0; i < out.z.v.size(); ++i) out.z.v[i] = a * z0.v[i] + b * eps_pred.v[i];
    return out;
}

namespace {
double lambda_of(const NoiseSchedule& sched, int t) {
    const double abar = sched.abar(t);
    return 0.5 * std::log(abar / (1.0 - abar));
}

/// ddim reconstruction with an explicit z0 estimate: the implied noise is
/// read back from the current state.
LatentSeq reconstruct(const LatentSeq& zt, const Mat& z0, int t_to, const NoiseSchedule& sched) {
    const double a_cur = std::sqrt(sched.abar(zt.t));
    const double b_cur = std::sqrt(1.0 - sched.abar(zt.t));
    const double a_to = std::sqrt(sched.abar(t_to));
    const double b_to = std::sqrt(1.0 - sched.abar(t_to));
    LatentSeq out;
    out.t = t_to;
    out.z = Mat(zt.z.rows, zt.z.cols);
    for (size_t i = 0; i < out.z.v.size(); ++i) {
        const double eps_hat = (zt.z.v[i] - a_cur * z0.v[i]) / b_cur;
        out.z.v[i] = a_to * z0.v[i] + b_to * eps_hat;
    }
    return out;
}
}  // namespace

LatentSeq multistep2_step(const LatentSeq& zt, std::span<const X0History> history, int t_to,
                          const NoiseSchedule& sched) {
    if (history.empty()) throw std::invalid_argument("multistep2_step: empty history");
    const X0History& cur = history.back();
    if (cur.t != zt.t) throw std::invalid_argument("multistep2_step: history head mismatch");
    if (t_to >= zt.t) throw std::invalid_argument("multistep2_step: t_to must decrease");

    if (history.size() < 2 || t_to == 0) return reconstruct(zt, cur.x0, t_to, sched);

    const X0History& prev = history[history.size() - 2];
    const double h = lambda_of(sched, t_to) - lambda_of(sched, cur.t);
    const double h_prev = lambda_of(sched, cur.t) - lambda_of(sched, prev.t);
    const double r = h / (2.0 * h_prev);
    Mat d(cur.x0.rows, cur.x0.cols);
    for (size_t i = 0; i < d.v.size(); ++i)
        d.v[i] = (1.0 + r) * cur.x0.v[i] - r * prev.x0.v[i];
    return reconstruct(zt, d, t_to, sched);
}

Mat sample(const DenoiserFn& denoise, int n, int d, const SamplerConfig& cfg,
           const NoiseSchedule& sched, Rng& rng, const AnchorGuidance* guidance) {
    cfg.validate(sched.steps);
    LatentSeq z;
    z.t = cfg.timestep_grid.front();
    z.z = gaussian(rng, n, d);

    std::vector<X0History> history;
    for (size_t i = 0; i + 1 < cfg.timestep_grid.size(); ++i) {
        const int t_from = cfg.timestep_grid[i];
        const int t_to = cfg.timestep_grid[i + 1];
        const Mat eps_pred = denoise(z.z, t_from);
        Mat x0 = diffusion::estimate_z0(z, eps_pred, sched);
        history.push_back({std::move(x0), t_from});
        if (history.size() > 2) history.erase(history.begin());

        if (cfg.order == 2)
            z = multistep2_step(z, history, t_to, sched);
        else
            z = ddim_step(z, eps_pred, t_from, t_to, sched);

        if (guidance && guidance->eta != 0.0) {
            for (size_t k = 0; k < guidance->anchors.timesteps.size(); ++k) {
                const int t_k = guidance->anchors.timesteps[k];
                if (t_from >= t_k && t_k > t_to) {
                    const Mat& target = guidance->anchors.targets[k];
                    for (size_t j = 0; j < z.z.v.size(); ++j)
                        z.z.v[j] -= guidance->eta * 2.0 * (z.z.v[j] - target.v[j]);
                }
            }
        }
    }
    return z.z;
}

DenoiserFn analytic_gaussian_denoiser(const NoiseSchedule& sched) {
    return [&sched](const Mat& z, int t) {
        const double b = std::sqrt(1.0 - sched.abar(t));
        Mat eps(z.rows, z.cols);
        for (size_t i = 0; i < eps.v.size(); ++i) eps.v[i] = b * z.v[i];
        return eps;
    };
}

}  // namespace drdiff::sampler
