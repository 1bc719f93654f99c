// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace drdiff::attn {

namespace {
thread_local size_t g_last_workspace_doubles = 0;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

void AttnParams::validate() const {
    if (d_model < 1 || heads < 1 || d_model % heads != 0)
        throw std::invalid_argument("attn: d_model must be a positive multiple of heads");
    if (wq.rows != d_model || wq.cols != d_model || !wq.same_shape(wk) || !wq.same_shape(wv) ||
        !wq.same_shape(wo))
        throw std::invalid_argument("attn: projection shapes must be d_model x d_model");
    if (!wq.all_finite() || !wk.all_finite() || !wv.all_finite() || !wo.all_finite())
        throw std::invalid_argument("attn: non-finite projection");
}

AttnParams AttnParams::init(int d_model, int heads, Rng& rng) {
    AttnParams p;
    p.d_model = d_model;
    p.heads = heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    p.wq = gaussian(rng, d_model, d_model) * s;
    p.wk = gaussian(rng, d_model, d_model) * s;
    p.wv = gaussian(rng, d_model, d_model) * s;
    p.wo = gaussian(rng, d_model, d_model) * s;
    p.validate();
    return p;
}

Mat masked_attention(const Mat& q, const Mat& k, const Mat& v, const hsa::AttentionMask& mask) {
    if (q.rows != mask.n || k.rows != mask.n || v.rows != mask.n)
        throw std::invalid_argument("masked_attention: row count must match mask");
    if (q.cols != k.cols || k.cols != v.cols)
        throw std::invalid_argument("masked_attention: Q, K, V widths must agree");
    const int d = q.cols;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Mat out(mask.n, d);
    std::vector<double> scores(mask.max_row_len());
    for (int i = 0; i < mask.n; ++i) {
        const auto& row = mask.rows[i];
        const auto qi = q.row(i);
        for (size_t s = 0; s < row.size(); ++s)
            scores[s] = dot(qi, k.row(row[s])) * inv_sqrt_d;
        softmax_row_inplace({scores.data(), row.size()});
        auto oi = out.row(i);
        for (size_t s = 0; s < row.size(); ++s) {
            const double w = scores[s];
            const auto vj = v.row(row[s]);
            for (int c = 0; c < d; ++c) oi[c] += w * vj[c];
        }
    }
    g_last_workspace_doubles = out.size() + scores.size();
    return out;
}

size_t last_attention_workspace_doubles() { return g_last_workspace_doubles; }

SparseRowWeights hybrid_mix(const SparseRowWeights& local, const SparseRowWeights& global, int i,
                            const HybridMixParams& p) {
    if (local.cols.size() != local.w.size() || global.cols.size() != global.w.size())
        throw std::invalid_argument("hybrid_mix: ragged weight row");
    SparseRowWeights out;
    out.cols.reserve(local.cols.size() + global.cols.size());
    out.w.reserve(local.cols.size() + global.cols.size());
    size_t a = 0, b = 0;
    double total = 0.0;
    while (a < local.cols.size() || b < global.cols.size()) {
        const int32_t ca = (a < local.cols.size()) ? local.cols[a] : INT32_MAX;
        const int32_t cb = (b < global.cols.size()) ? global.cols[b] : INT32_MAX;
        const int32_t j = std::min(ca, cb);
        const double wl = (ca == j) ? local.w[a++] : 0.0;
        const double wg = (cb == j) ? global.w[b++] : 0.0;
        const double alpha = sigmoid(p.beta * static_cast<double>(j - i));
        const double m = alpha * wl + (1.0 - alpha) * wg;
        out.cols.push_back(j);
        out.w.push_back(m);
        total += m;
    }
    if (total > 0.0)
        for (double& w : out.w) w /= total;
    return out;
}

namespace {
SparseRowWeights row_softmax_weights(const Mat& q, const Mat& k, const hsa::AttentionMask& mask,
                                     int i, double inv_sqrt_d) {
    SparseRowWeights r;
    const auto& row = mask.rows[i];
    r.cols = row;
    r.w.resize(row.size());
    const auto qi = q.row(i);
    for (size_t s = 0; s < row.size(); ++s) r.w[s] = dot(qi, k.row(row[s])) * inv_sqrt_d;
    softmax_row_inplace(r.w);
    return r;
}
}  // namespace

Mat hybrid_masked_attention(const Mat& q, const Mat& k, const Mat& v,
                            const hsa::AttentionMask& local_mask,
                            const hsa::AttentionMask& global_mask, const HybridMixParams& p) {
    if (local_mask.n != global_mask.n)
        throw std::invalid_argument("hybrid_masked_attention: mask size mismatch");
    if (q.rows != local_mask.n || k.rows != local_mask.n || v.rows != local_mask.n)
        throw std::invalid_argument("hybrid_masked_attention: row count must match masks");
    if (q.cols != k.cols || k.cols != v.cols)
        throw std::invalid_argument("hybrid_masked_attention: Q, K, V widths must agree");
    const int d = q.cols;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Mat out(local_mask.n, d);
    for (int i = 0; i < local_mask.n; ++i) {
        const auto lw = row_softmax_weights(q, k, local_mask, i, inv_sqrt_d);
        const auto gw = row_softmax_weights(q, k, global_mask, i, inv_sqrt_d);
        const auto mixed = hybrid_mix(lw, gw, i, p);
        auto oi = out.row(i);
        for (size_t s = 0; s < mixed.cols.size(); ++s) {
            const auto vj = v.row(mixed.cols[s]);
            for (int c = 0; c < d; ++c) oi[c] += mixed.w[s] * vj[c];
        }
    }
    return out;
}

uint64_t flop_account(const hsa::AttentionMask& mask, int d_model, int heads) {
    if (d_model < 1 || heads < 1 || d_model % heads != 0)
        throw std::invalid_argument("flop_account: d_model must be a positive multiple of heads");
    const uint64_t d_head = static_cast<uint64_t>(d_model / heads);
    const uint64_t attn = 2ULL * mask.nnz * d_head * static_cast<uint64_t>(heads);
    const uint64_t proj = 4ULL * static_cast<uint64_t>(mask.n) * d_model * d_model;
    return attn + proj;
}

}  // namespace drdiff::attn
