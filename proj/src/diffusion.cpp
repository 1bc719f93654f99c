// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace drdiff::diffusion {

namespace {
constexpr double kBetaLo = 1e-8;
constexpr double kBetaHi = 0.999;
constexpr double kBetaMin = 1e-4;
constexpr double kBetaMax = 0.02;

double clip_beta(double b) { return std::clamp(b, kBetaLo, kBetaHi); }
}  // namespace

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "exponential") return ScheduleKind::Exponential;
    if (s == "cosine") return ScheduleKind::Cosine;
    if (s == "sqrt") return ScheduleKind::Sqrt;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

const char* schedule_kind_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Linear: return "linear";
        case ScheduleKind::Exponential: return "exponential";
        case ScheduleKind::Cosine: return "cosine";
        case ScheduleKind::Sqrt: return "sqrt";
    }
    return "?";
}

void NoiseSchedule::validate() const {
    if (steps < 2) throw std::logic_error("schedule: T must be >= 2");
    const size_t len = static_cast<size_t>(steps) + 1;
    if (beta.size() != len || alpha.size() != len || alpha_bar.size() != len)
        throw std::logic_error("schedule: array length mismatch");
    if (beta[0] != 0.0 || alpha[0] != 1.0 || alpha_bar[0] != 1.0)
        throw std::logic_error("schedule: bad clean sentinel");
    for (int t = 1; t <= steps; ++t) {
        if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw std::logic_error("schedule: beta out of (0,1)");
        if (std::abs(alpha[t] - (1.0 - beta[t])) > 1e-15)
            throw std::logic_error("schedule: alpha != 1 - beta");
        if (!(alpha_bar[t] < alpha_bar[t - 1])) throw std::logic_error("schedule: abar not decreasing");
        if (!(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0))
            throw std::logic_error("schedule: abar out of (0,1]");
    }
}

NoiseSchedule make_schedule(ScheduleKind kind, int steps) {
    if (steps < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    NoiseSchedule s;
    s.kind = kind;
    s.steps = steps;
    s.beta.assign(steps + 1, 0.0);

    switch (kind) {
        case ScheduleKind::Linear:
            for (int t = 1; t <= steps; ++t)
                s.beta[t] = clip_beta(kBetaMin + (kBetaMax - kBetaMin) *
                                                     (static_cast<double>(t - 1) / (steps - 1)));
            break;
        case ScheduleKind::Exponential: {
            const double r = std::pow(kBetaMax / kBetaMin, 1.0 / (steps - 1));
            double b = kBetaMin;
            for (int t = 1; t <= steps; ++t, b *= r) s.beta[t] = clip_beta(b);
            break;
        }
        case ScheduleKind::Cosine: {
            const double off = 0.008;
            auto f = [&](double t) {
                const double x = (t / steps + off) / (1.0 + off) * std::numbers::pi / 2.0;
                const double c = std::cos(x);
                return c * c;
            };
            for (int t = 1; t <= steps; ++t) s.beta[t] = clip_beta(1.0 - f(t) / f(t - 1.0));
            break;
        }
        case ScheduleKind::Sqrt: {
            auto raw = [&](int t) {
                return (t == 0) ? 1.0 : 1.0 - std::sqrt(static_cast<double>(t) / steps + 1e-4);
            };
            for (int t = 1; t <= steps; ++t) {
                const double prev = raw(t - 1);
                const double cur = raw(t);
                s.beta[t] = (prev > 0.0) ? clip_beta(1.0 - cur / prev) : kBetaHi;
            }
            break;
        }
    }

    s.alpha.assign(steps + 1, 1.0);
    s.alpha_bar.assign(steps + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    s.validate();
    return s;
}

void AnchorSet::validate(int steps) const {
    if (targets.size() != timesteps.size() || lambdas.size() != timesteps.size())
        throw std::invalid_argument("anchors: list length mismatch");
    for (size_t k = 0; k < timesteps.size(); ++k) {
        if (timesteps[k] <= 0 || timesteps[k] >= steps)
            throw std::invalid_argument("anchors: timestep outside (0, T)");
        if (k > 0 && timesteps[k] <= timesteps[k - 1])
            throw std::invalid_argument("anchors: timesteps not strictly increasing");
        if (lambdas[k] < 0.0) throw std::invalid_argument("anchors: negative weight");
    }
}

LatentSeq q_sample(const LatentSeq& z0, int t, const Mat& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps) throw std::invalid_argument("q_sample: t out of [1, T]");
    if (!z0.z.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
    const double a = std::sqrt(sched.abar(t));
    const double b = std::sqrt(1.0 - sched.abar(t));
    LatentSeq out;
    out.t = t;
    out.z = Mat(z0.z.rows, z0.z.cols);
    for (size_t i = 0; i < out.z.v.size(); ++i) out.z.v[i] = a * z0.z.v[i] + b * eps.v[i];
    return out;
}

Mat q_step(const Mat& prev, int t, const Mat& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps) throw std::invalid_argument("q_step: t out of [1, T]");
    if (!prev.same_shape(eps)) throw std::invalid_argument("q_step: shape mismatch");
    const double a = std::sqrt(1.0 - sched.beta[t]);
    const double b = std::sqrt(sched.beta[t]);
    Mat out(prev.rows, prev.cols);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * prev.v[i] + b * eps.v[i];
    return out;
}

double diffusion_loss(const Mat& eps_true, const Mat& eps_pred) {
    if (!eps_true.same_shape(eps_pred)) throw std::invalid_argument("diffusion_loss: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < eps_true.v.size(); ++i) {
        const double d = eps_true.v[i] - eps_pred.v[i];
        s += d * d;
    }
    return s / static_cast<double>(eps_true.v.size());
}

Mat estimate_z0(const LatentSeq& zt, const Mat& eps_pred, const NoiseSchedule& sched) {
    if (zt.t < 1 || zt.t > sched.steps) throw std::invalid_argument("estimate_z0: t out of [1, T]");
    if (!zt.z.same_shape(eps_pred)) throw std::invalid_argument("estimate_z0: shape mismatch");
    const double abar = sched.abar(zt.t);
    if (abar < 1e-12) throw std::runtime_error("degenerate inversion");
    const double inv_a = 1.0 / std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    Mat out(zt.z.rows, zt.z.cols);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (zt.z.v[i] - b * eps_pred.v[i]) * inv_a;
    return out;
}

Mat project_to_anchor(const LatentSeq& zt, const Mat& eps_pred, int t_k, const Mat& eps_prime,
                      const NoiseSchedule& sched) {
    if (t_k <= 0 || t_k >= sched.steps)
        throw std::invalid_argument("project_to_anchor: t_k outside (0, T)");
    const Mat z0 = estimate_z0(zt, eps_pred, sched);
    if (!z0.same_shape(eps_prime)) throw std::invalid_argument("project_to_anchor: shape mismatch");
    const double a = std::sqrt(sched.abar(t_k));
    const double b = std::sqrt(1.0 - sched.abar(t_k));
    Mat out(z0.rows, z0.cols);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * z0.v[i] + b * eps_prime.v[i];
    return out;
}

Mat summarize(const Mat& z0, int segment_count) {
    if (segment_count < 1) throw std::invalid_argument("summarize: segment_count must be >= 1");
    if (segment_count > z0.rows) throw std::invalid_argument("summarize: more segments than rows");
    Mat out(z0.rows, z0.cols);
    const int base = z0.rows / segment_count;
    for (int s = 0; s < segment_count; ++s) {
        const int lo = s * base;
        const int hi = (s == segment_count - 1) ? z0.rows : lo + base;
        std::vector<double> mean(z0.cols, 0.0);
        for (int i = lo; i < hi; ++i)
            for (int c = 0; c < z0.cols; ++c) mean[c] += z0.at(i, c);
        for (int c = 0; c < z0.cols; ++c) mean[c] /= static_cast<double>(hi - lo);
        for (int i = lo; i < hi; ++i)
            for (int c = 0; c < z0.cols; ++c) out.at(i, c) = mean[c];
    }
    return out;
}

BuiltAnchors build_anchor_targets(const LatentSeq& z0, const NoiseSchedule& sched,
                                  const std::vector<int>& timesteps, int segment_count,
                                  const std::vector<double>& lambdas, Rng& rng) {
    if (lambdas.size() != timesteps.size())
        throw std::invalid_argument("build_anchor_targets: lambda/timestep length mismatch");
    const Mat summ = summarize(z0.z, segment_count);
    BuiltAnchors out;
    out.set.timesteps = timesteps;
    out.set.lambdas = lambdas;
    for (int t_k : timesteps) {
        if (t_k <= 0 || t_k >= sched.steps)
            throw std::invalid_argument("build_anchor_targets: timestep outside (0, T)");
        Mat eps_prime = gaussian(rng, z0.z.rows, z0.z.cols);
        const double a = std::sqrt(sched.abar(t_k));
        const double b = std::sqrt(1.0 - sched.abar(t_k));
        Mat target(z0.z.rows, z0.z.cols);
        for (size_t i = 0; i < target.v.size(); ++i)
            target.v[i] = a * summ.v[i] + b * eps_prime.v[i];
        out.set.targets.push_back(std::move(target));
        out.eps_prime.push_back(std::move(eps_prime));
    }
    out.set.validate(sched.steps);
    return out;
}

double sas_loss(const LatentSeq& zt, const Mat& eps_pred, const AnchorSet& anchors,
                std::span<const Mat> eps_prime, const NoiseSchedule& sched) {
    if (eps_prime.size() != anchors.timesteps.size())
        throw std::invalid_argument("sas_loss: anchor/eps_prime length mismatch");
    double loss = 0.0;
    for (size_t k = 0; k < anchors.timesteps.size(); ++k) {
        if (anchors.lambdas[k] == 0.0) continue;
        const Mat proj = project_to_anchor(zt, eps_pred, anchors.timesteps[k], eps_prime[k], sched);
        double sq = 0.0;
        for (size_t i = 0; i < proj.v.size(); ++i) {
            const double d = proj.v[i] - anchors.targets[k].v[i];
            sq += d * d;
        }
        loss += anchors.lambdas[k] * sq / static_cast<double>(proj.v.size());
    }
    return loss;
}

Mat sas_loss_grad(const LatentSeq& zt, const Mat& eps_pred, const AnchorSet& anchors,
                  std::span<const Mat> eps_prime, const NoiseSchedule& sched) {
    if (eps_prime.size() != anchors.timesteps.size())
        throw std::invalid_argument("sas_loss_grad: anchor/eps_prime length mismatch");
    Mat grad(eps_pred.rows, eps_pred.cols);
    const double abar_t = sched.abar(zt.t);
    const double chain = -std::sqrt(1.0 - abar_t) / std::sqrt(abar_t);
    for (size_t k = 0; k < anchors.timesteps.size(); ++k) {
        if (anchors.lambdas[k] == 0.0) continue;
        const Mat proj = project_to_anchor(zt, eps_pred, anchors.timesteps[k], eps_prime[k], sched);
        const double a_k = std::sqrt(sched.abar(anchors.timesteps[k]));
        const double scale =
            anchors.lambdas[k] * 2.0 / static_cast<double>(proj.v.size()) * a_k * chain;
        for (size_t i = 0; i < grad.v.size(); ++i)
            grad.v[i] += scale * (proj.v[i] - anchors.targets[k].v[i]);
    }
    return grad;
}

void write_schedule_csv(std::ostream& os, const NoiseSchedule& sched) {
    os << "t,beta,alpha,alpha_bar\n";
    char buf[128];
    for (int t = 1; t <= sched.steps; ++t) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", t, sched.beta[t], sched.alpha[t],
                      sched.alpha_bar[t]);
        os << buf;
    }
}

}  // namespace drdiff::diffusion
