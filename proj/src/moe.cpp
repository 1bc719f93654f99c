// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/moe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace drdiff::moe {

namespace {
std::atomic<uint64_t> g_expert_evals{0};
}

void RouterParams::validate() const {
    if (w_gate.rows < 1 || w_gate.cols < 1) throw std::invalid_argument("router: empty gate");
    if (b_gate.rows != 1 || b_gate.cols != w_gate.cols)
        throw std::invalid_argument("router: bias shape mismatch");
    if (!w_gate.all_finite() || !b_gate.all_finite())
        throw std::invalid_argument("router: non-finite parameters");
}

RouterParams RouterParams::init(int d_model, int experts, Rng& rng) {
    RouterParams p;
    p.w_gate = gaussian(rng, d_model, experts) * (1.0 / std::sqrt(static_cast<double>(d_model)));
    p.b_gate = Mat::zeros(1, experts);
    return p;
}

void ExpertParams::validate() const {
    if (w1.rows < 1 || w1.cols < 1) throw std::invalid_argument("expert: empty w1");
    if (b1.rows != 1 || b1.cols != w1.cols) throw std::invalid_argument("expert: b1 shape");
    if (w2.rows != w1.cols || w2.cols != w1.rows) throw std::invalid_argument("expert: w2 shape");
    if (b2.rows != 1 || b2.cols != w1.rows) throw std::invalid_argument("expert: b2 shape");
}

ExpertParams ExpertParams::init(int d_model, int d_ff, double capacity_mult, Rng& rng) {
    const int hidden = std::max(1, static_cast<int>(std::floor(capacity_mult * d_ff)));
    ExpertParams e;
    e.capacity_mult = capacity_mult;
    e.w1 = gaussian(rng, d_model, hidden) * (1.0 / std::sqrt(static_cast<double>(d_model)));
    e.b1 = Mat::zeros(1, hidden);
    e.w2 = gaussian(rng, hidden, d_model) * (1.0 / std::sqrt(static_cast<double>(hidden)));
    e.b2 = Mat::zeros(1, d_model);
    return e;
}

std::vector<double> route(std::span<const double> h, const RouterParams& p) {
    if (static_cast<int>(h.size()) != p.w_gate.rows)
        throw std::invalid_argument("route: input width mismatch");
    std::vector<double> logits(p.w_gate.cols);
    for (int j = 0; j < p.w_gate.cols; ++j) {
        double s = p.b_gate.at(0, j);
        for (int i = 0; i < p.w_gate.rows; ++i) s += h[i] * p.w_gate.at(i, j);
        logits[j] = s;
    }
    return logits;
}

GatingOutput topk_gate(std::span<const double> logits, int k) {
    const int m = static_cast<int>(logits.size());
    if (k < 1 || k > m) throw std::invalid_argument("topk_gate: k out of range");

    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[a] > logits[b]; });

    GatingOutput g;
    g.logits.assign(logits.begin(), logits.end());
    g.topk.assign(order.begin(), order.begin() + k);
    std::sort(g.topk.begin(), g.topk.end());

    double mx = kNegInf;
    for (int j : g.topk) mx = std::max(mx, logits[j]);
    double sum = 0.0;
    std::vector<double> e(k);
    for (int s = 0; s < k; ++s) {
        e[s] = std::exp(logits[g.topk[s]] - mx);
        sum += e[s];
    }
    g.weights.assign(m, 0.0);
    for (int s = 0; s < k; ++s) g.weights[g.topk[s]] = e[s] / sum;
    return g;
}

std::vector<double> expert_forward(std::span<const double> h, const ExpertParams& e) {
    if (static_cast<int>(h.size()) != e.w1.rows)
        throw std::invalid_argument("expert_forward: input width mismatch");
    g_expert_evals.fetch_add(1, std::memory_order_relaxed);
    const int hidden = e.w1.cols;
    const int d = e.w1.rows;
    std::vector<double> a(hidden);
    for (int j = 0; j < hidden; ++j) {
        double s = e.b1.at(0, j);
        for (int i = 0; i < d; ++i) s += h[i] * e.w1.at(i, j);
        a[j] = std::max(0.0, s);
    }
    std::vector<double> y(d);
    for (int c = 0; c < d; ++c) {
        double s = e.b2.at(0, c);
        for (int j = 0; j < hidden; ++j) s += a[j] * e.w2.at(j, c);
        y[c] = s;
    }
    return y;
}

std::pair<std::vector<double>, GatingOutput> moe_forward(std::span<const double> h,
                                                         const RouterParams& router,
                                                         std::span<const ExpertParams> experts,
                                                         int k) {
    if (experts.empty()) throw std::invalid_argument("moe_forward: no experts");
    if (static_cast<int>(experts.size()) != router.experts())
        throw std::invalid_argument("moe_forward: router/expert count mismatch");
    const auto logits = route(h, router);
    auto gating = topk_gate(logits, k);
    std::vector<double> out(h.size(), 0.0);
    for (int j : gating.topk) {
        const auto y = expert_forward(h, experts[j]);
        const double w = gating.weights[j];
        for (size_t c = 0; c < out.size(); ++c) out[c] += w * y[c];
    }
    return {std::move(out), std::move(gating)};
}

LoadStats compute_load_stats(std::span<const GatingOutput> gatings, int experts, int k,
                             double lambda_aux) {
    if (gatings.empty()) throw std::invalid_argument("compute_load_stats: empty batch");
    LoadStats s;
    s.lambda_aux = lambda_aux;
    s.f.assign(experts, 0.0);
    s.p.assign(experts, 0.0);
    for (const auto& g : gatings) {
        for (int j : g.topk) s.f[j] += 1.0;
        const auto probs = softmax_row(g.logits);
        for (int j = 0; j < experts; ++j) s.p[j] += probs[j];
    }
    const double tokens = static_cast<double>(gatings.size());
    for (int j = 0; j < experts; ++j) {
        s.f[j] /= tokens * static_cast<double>(k);
        s.p[j] /= tokens;
    }
    return s;
}

double load_balance_loss(const LoadStats& stats) {
    if (stats.f.size() != stats.p.size())
        throw std::invalid_argument("load_balance_loss: f/p length mismatch");
    const double m = static_cast<double>(stats.f.size());
    double s = 0.0;
    for (size_t j = 0; j < stats.f.size(); ++j) s += stats.f[j] * stats.p[j];
    return stats.lambda_aux * m * s;
}

uint64_t expert_eval_count() { return g_expert_evals.load(std::memory_order_relaxed); }
void reset_expert_eval_count() { g_expert_evals.store(0, std::memory_order_relaxed); }

std::vector<double> moe_forward_cached(std::span<const double> h, const RouterParams& router,
                                       std::span<const ExpertParams> experts, int k,
                                       MoeTokenCache& cache) {
    if (experts.empty()) throw std::invalid_argument("moe_forward_cached: no experts");
    const auto logits = route(h, router);
    cache.gating = topk_gate(logits, k);
    cache.probs = softmax_row(cache.gating.logits);
    cache.input.assign(h.begin(), h.end());
    cache.hidden.clear();
    cache.out.clear();

    std::vector<double> y(h.size(), 0.0);
    for (int j : cache.gating.topk) {
        const ExpertParams& e = experts[j];
        g_expert_evals.fetch_add(1, std::memory_order_relaxed);
        const int hidden = e.w1.cols;
        const int d = e.w1.rows;
        std::vector<double> a(hidden);
        for (int c = 0; c < hidden; ++c) {
            double s = e.b1.at(0, c);
            for (int i = 0; i < d; ++i) s += h[i] * e.w1.at(i, c);
            a[c] = std::max(0.0, s);
        }
        std::vector<double> o(d);
        for (int c = 0; c < d; ++c) {
            double s = e.b2.at(0, c);
            for (int i = 0; i < hidden; ++i) s += a[i] * e.w2.at(i, c);
            o[c] = s;
        }
        const double w = cache.gating.weights[j];
        for (int c = 0; c < d; ++c) y[c] += w * o[c];
        cache.hidden.push_back(std::move(a));
        cache.out.push_back(std::move(o));
    }
    return y;
}

void moe_backward(const MoeTokenCache& cache, const RouterParams& router,
                  std::span<const ExpertParams> experts, std::span<const double> dy,
                  std::span<const double> aux_dp, RouterParams& d_router,
                  std::vector<ExpertParams>& d_experts, std::span<double> dh) {
    const int m = router.experts();
    const int d = router.w_gate.rows;
    const int k = static_cast<int>(cache.gating.topk.size());

    std::vector<double> dlogits(m, 0.0);

    // Gating-weight path: dG restricted to the surviving softmax.
    std::vector<double> dg(k, 0.0);
    double gdg = 0.0;
    for (int s = 0; s < k; ++s) {
        const int j = cache.gating.topk[s];
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += dy[c] * cache.out[s][c];
        dg[s] = acc;
        gdg += cache.gating.weights[j] * acc;
    }
    for (int s = 0; s < k; ++s) {
        const int j = cache.gating.topk[s];
        dlogits[j] += cache.gating.weights[j] * (dg[s] - gdg);
    }

    // Load-balancing path: dL/dP through the full softmax.
    if (!aux_dp.empty()) {
        double pg = 0.0;
        for (int j = 0; j < m; ++j) pg += cache.probs[j] * aux_dp[j];
        for (int j = 0; j < m; ++j) dlogits[j] += cache.probs[j] * (aux_dp[j] - pg);
    }

    // Router parameter gradients; the input h is stop-gradient here.
    for (int j = 0; j < m; ++j) {
        if (dlogits[j] == 0.0) continue;
        d_router.b_gate.at(0, j) += dlogits[j];
        for (int i = 0; i < d; ++i) d_router.w_gate.at(i, j) += cache.input[i] * dlogits[j];
    }

    // Expert path; the only route into dh.
    for (int s = 0; s < k; ++s) {
        const int j = cache.gating.topk[s];
        const ExpertParams& e = experts[j];
        ExpertParams& ge = d_experts[j];
        const double w = cache.gating.weights[j];
        const int hidden = e.w1.cols;

        std::vector<double> dout(d);
        for (int c = 0; c < d; ++c) dout[c] = w * dy[c];
        for (int c = 0; c < d; ++c) ge.b2.at(0, c) += dout[c];
        std::vector<double> dpre(hidden, 0.0);
        for (int i = 0; i < hidden; ++i) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                ge.w2.at(i, c) += cache.hidden[s][i] * dout[c];
                acc += e.w2.at(i, c) * dout[c];
            }
            dpre[i] = (cache.hidden[s][i] > 0.0) ? acc : 0.0;
        }
        for (int i = 0; i < hidden; ++i) {
            if (dpre[i] == 0.0) continue;
            ge.b1.at(0, i) += dpre[i];
            for (int c = 0; c < d; ++c) ge.w1.at(c, i) += cache.input[c] * dpre[i];
        }
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int i = 0; i < hidden; ++i) acc += e.w1.at(c, i) * dpre[i];
            dh[c] += acc;
        }
    }
}

}  // namespace drdiff::moe
