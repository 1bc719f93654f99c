// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/hsa.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace drdiff::hsa {

const char* mode_tag(Mode m) {
    switch (m) {
        case Mode::Dense: return "Dense";
        case Mode::FourK: return "4K";
        case Mode::EightK: return "8K";
        case Mode::SixteenKPlus: return "16K+";
    }
    return "?";
}

void HSAConfig::validate() const {
    if (!(0 < n1 && n1 < n2 && n2 < n3)) throw std::invalid_argument("hsa: need 0 < n1 < n2 < n3");
    if (w4k < 1 || w8k < 1 || w16k < 1) throw std::invalid_argument("hsa: windows must be >= 1");
    if (stride_s < 1 || s_meta < 1) throw std::invalid_argument("hsa: strides must be >= 1");
    if (layers_L < 1) throw std::invalid_argument("hsa: layers_L must be >= 1");
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("hsa: rho must be in (0, 1]");
    if (anchor_cap < 1) throw std::invalid_argument("hsa: anchor_cap must be >= 1");
    if (scale_c < 1) throw std::invalid_argument("hsa: scale_c must be >= 1");
}

void AttentionMask::recount() {
    nnz = 0;
    for (const auto& r : rows) nnz += r.size();
}

void AttentionMask::validate() const {
    if (n < 1 || static_cast<int>(rows.size()) != n) throw std::logic_error("mask: bad row count");
    uint64_t total = 0;
    for (int i = 0; i < n; ++i) {
        const auto& r = rows[i];
        if (r.empty()) throw std::logic_error("mask: empty row");
        for (size_t k = 0; k < r.size(); ++k) {
            if (r[k] < 0 || r[k] >= n) throw std::logic_error("mask: column out of range");
            if (k > 0 && r[k] <= r[k - 1]) throw std::logic_error("mask: row not strictly increasing");
        }
        if (!std::binary_search(r.begin(), r.end(), i)) throw std::logic_error("mask: missing self");
        total += r.size();
    }
    if (total != nnz) throw std::logic_error("mask: nnz mismatch");
}

int AttentionMask::max_row_len() const {
    size_t m = 0;
    for (const auto& r : rows) m = std::max(m, r.size());
    return static_cast<int>(m);
}

AttentionMask mask_dense(int n) {
    if (n < 1) throw std::invalid_argument("mask_dense: n must be >= 1");
    AttentionMask m;
    m.n = n;
    m.rows.resize(n);
    std::vector<int32_t> full(n);
    for (int j = 0; j < n; ++j) full[j] = j;
    for (int i = 0; i < n; ++i) m.rows[i] = full;
    m.nnz = static_cast<uint64_t>(n) * n;
    return m;
}

AttentionMask mask_local(int n, int w) {
    if (n < 1) throw std::invalid_argument("mask_local: n must be >= 1");
    if (w < 0) throw std::invalid_argument("mask_local: w must be >= 0");
    AttentionMask m;
    m.n = n;
    m.rows.resize(n);
    for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - w);
        const int hi = std::min(n - 1, i + w);
        auto& r = m.rows[i];
        r.reserve(hi - lo + 1);
        for (int j = lo; j <= hi; ++j) r.push_back(j);
    }
    m.recount();
    return m;
}

AttentionMask mask_dilated(int n, int w, int stride, int dilation) {
    if (n < 1) throw std::invalid_argument("mask_dilated: n must be >= 1");
    if (w < 1 || stride < 1 || dilation < 1)
        throw std::invalid_argument("mask_dilated: w, stride, dilation must be >= 1");
    const int step = stride * dilation;
    const int kmax = w / (2 * step);
    AttentionMask m;
    m.n = n;
    m.rows.resize(n);
    for (int i = 0; i < n; ++i) {
        auto& r = m.rows[i];
        for (int k = -kmax; k <= kmax; ++k) {
            const int j = i + k * step;
            if (j >= 0 && j < n) r.push_back(j);
        }
    }
    m.recount();
    return m;
}

AttentionMask mask_global(int n, const std::vector<int32_t>& anchors, int local_w) {
    if (n < 1) throw std::invalid_argument("mask_global: n must be >= 1");
    if (local_w < 0) throw std::invalid_argument("mask_global: local_w must be >= 0");
    for (int32_t a : anchors)
        if (a < 0 || a >= n) throw std::invalid_argument("mask_global: anchor out of range");

    std::vector<char> is_anchor(n, 0);
    for (int32_t a : anchors) is_anchor[a] = 1;

    std::vector<int32_t> sorted_anchors(anchors);
    std::sort(sorted_anchors.begin(), sorted_anchors.end());
    sorted_anchors.erase(std::unique(sorted_anchors.begin(), sorted_anchors.end()),
                         sorted_anchors.end());

    AttentionMask m;
    m.n = n;
    m.rows.resize(n);
    for (int i = 0; i < n; ++i) {
        auto& r = m.rows[i];
        if (is_anchor[i]) {
            r.resize(n);
            for (int j = 0; j < n; ++j) r[j] = j;
            continue;
        }
        const int lo = std::max(0, i - local_w);
        const int hi = std::min(n - 1, i + local_w);
        // merge band and anchor list, both sorted
        size_t ai = 0;
        int j = lo;
        while (j <= hi || ai < sorted_anchors.size()) {
            const int32_t band = (j <= hi) ? j : n;
            const int32_t anch = (ai < sorted_anchors.size()) ? sorted_anchors[ai] : n;
            if (band < anch) {
                r.push_back(band);
                ++j;
            } else if (anch < band) {
                r.push_back(anch);
                ++ai;
            } else {
                r.push_back(band);
                ++j;
                ++ai;
            }
        }
    }
    m.recount();
    return m;
}

std::vector<int32_t> evenly_spaced(int n, int m) {
    m = std::clamp(m, 1, n);
    std::vector<int32_t> out;
    out.reserve(m);
    for (int j = 0; j < m; ++j) {
        const int32_t pos = static_cast<int32_t>((static_cast<int64_t>(n) * j) / m);
        if (out.empty() || out.back() != pos) out.push_back(pos);
    }
    return out;
}

std::vector<int32_t> pick_anchors(int n, double rho, int anchor_cap) {
    if (n < 1) throw std::invalid_argument("pick_anchors: n must be >= 1");
    const int from_rho = static_cast<int>(std::ceil(rho * n));
    const int count = std::min({std::max(from_rho, 1), anchor_cap, n});
    return evenly_spaced(n, count);
}

AttentionMask union_masks(const AttentionMask& a, const AttentionMask& b) {
    if (a.n != b.n) throw std::invalid_argument("union_masks: size mismatch");
    AttentionMask m;
    m.n = a.n;
    m.rows.resize(a.n);
    for (int i = 0; i < a.n; ++i) {
        auto& r = m.rows[i];
        r.reserve(a.rows[i].size() + b.rows[i].size());
        std::set_union(a.rows[i].begin(), a.rows[i].end(), b.rows[i].begin(), b.rows[i].end(),
                       std::back_inserter(r));
    }
    m.recount();
    return m;
}

Mode mode_for_length(const HSAConfig& cfg, int n) {
    if (n < 1) throw std::invalid_argument("mode_for_length: n must be >= 1");
    if (n <= cfg.n1) return Mode::Dense;
    if (n <= cfg.n2) return Mode::FourK;
    if (n <= cfg.n3) return Mode::EightK;
    return Mode::SixteenKPlus;
}

int layer_dilation(int layer_index) { return 1 << (layer_index % 4); }

AttentionMask build_hsa_mask(const HSAConfig& cfg, int n, int layer_index) {
    cfg.validate();
    if (n < 1) throw std::invalid_argument("build_hsa_mask: n must be >= 1");
    if (layer_index < 0 || layer_index >= cfg.layers_L)
        throw std::invalid_argument("build_hsa_mask: layer_index out of range");

    switch (mode_for_length(cfg, n)) {
        case Mode::Dense:
            return mask_dense(n);
        case Mode::FourK: {
            const int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
            return union_masks(mask_local(n, cfg.w4k),
                               mask_global(n, evenly_spaced(n, m), 0));
        }
        case Mode::EightK: {
            const int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
            return union_masks(mask_dilated(n, cfg.w8k, cfg.stride_s, layer_dilation(layer_index)),
                               mask_global(n, evenly_spaced(n, m), 0));
        }
        case Mode::SixteenKPlus: {
            // Row-side union: every query sees the meta-stride lattice plus all
            // anchors. Anchor rows are not densified here; doing so pushes the
            // fitted nnz exponent over the linear-complexity budget.
            const auto anchors = pick_anchors(n, cfg.rho, cfg.anchor_cap);
            const int kmax = cfg.w16k / (2 * cfg.s_meta);
            AttentionMask lattice;
            lattice.n = n;
            lattice.rows.resize(n);
            for (int i = 0; i < n; ++i) {
                auto& r = lattice.rows[i];
                for (int k = -kmax; k <= kmax; ++k) {
                    const int j = i + k * cfg.s_meta;
                    if (j >= 0 && j < n) r.push_back(j);
                }
            }
            AttentionMask anchor_cols;
            anchor_cols.n = n;
            anchor_cols.rows.resize(n);
            for (int i = 0; i < n; ++i) {
                auto& r = anchor_cols.rows[i];
                r = anchors;
                const auto it = std::lower_bound(r.begin(), r.end(), i);
                if (it == r.end() || *it != i) r.insert(it, i);
            }
            lattice.recount();
            anchor_cols.recount();
            return union_masks(lattice, anchor_cols);
        }
    }
    throw std::logic_error("build_hsa_mask: unreachable");
}

DecisionNetParams DecisionNetParams::init(int dim, int hidden, Rng& rng) {
    DecisionNetParams p;
    p.w1 = gaussian(rng, dim, hidden) * (1.0 / std::sqrt(static_cast<double>(dim)));
    p.b1 = Mat::zeros(1, hidden);
    p.w2 = gaussian(rng, hidden, 4) * (1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b2 = Mat::zeros(1, 4);
    return p;
}

ModeDecision decide_mode(const HSAConfig& cfg, int n, std::span<const double> h_bar,
                         const DecisionNetParams& phi) {
    if (static_cast<int>(h_bar.size()) != phi.w1.rows)
        throw std::invalid_argument("decide_mode: h_bar does not match phi");
    const int hidden = phi.w1.cols;
    std::vector<double> h(hidden, 0.0);
    for (int j = 0; j < hidden; ++j) {
        double s = phi.b1.at(0, j);
        for (int i = 0; i < phi.w1.rows; ++i) s += h_bar[i] * phi.w1.at(i, j);
        h[j] = std::max(0.0, s);
    }
    std::vector<double> logits(4, 0.0);
    for (int j = 0; j < 4; ++j) {
        double s = phi.b2.at(0, j);
        for (int i = 0; i < hidden; ++i) s += h[i] * phi.w2.at(i, j);
        logits[j] = s;
    }

    ModeDecision d;
    d.probs = softmax_row(logits);
    const Mode bracket = mode_for_length(cfg, n);

    // The length indicator admits exactly one mode; scan in decreasing
    // complexity order so ties break toward the cheaper mode.
    double best = -1.0;
    int best_mode = -1;
    for (int m = 0; m < 4; ++m) {
        const bool eligible = (static_cast<Mode>(m) == bracket);
        const double score = eligible ? d.probs[m] : 0.0;
        if (eligible && score >= best) {
            best = score;
            best_mode = m;
        }
    }
    if (best_mode < 0) throw std::logic_error("decide_mode: no mode covers this length");
    d.active = static_cast<Mode>(best_mode);
    return d;
}

double fit_loglog_slope(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 3) throw std::invalid_argument("fit_loglog_slope: need at least 3 points");
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : points) {
        mx += std::log(x);
        my += std::log(y);
    }
    mx /= static_cast<double>(points.size());
    my /= static_cast<double>(points.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& [x, y] : points) {
        const double dx = std::log(x) - mx;
        sxy += dx * (std::log(y) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

double nnz_scaling_fit(const HSAConfig& cfg, const std::vector<int>& lengths) {
    if (lengths.size() < 3) throw std::invalid_argument("nnz_scaling_fit: need at least 3 lengths");
    std::vector<std::pair<double, double>> pts;
    pts.reserve(lengths.size());
    for (int n : lengths) {
        const auto mask = build_hsa_mask(cfg, n, 0);
        pts.emplace_back(static_cast<double>(n), static_cast<double>(mask.nnz));
    }
    return fit_loglog_slope(pts);
}

double wg_span(const HSAConfig& cfg, int n) {
    if (n <= 1) return static_cast<double>(n);
    const double scaled = cfg.scale_c * n / std::log2(static_cast<double>(n));
    return std::min(static_cast<double>(n), scaled);
}

void write_mask_dump(std::ostream& os, const AttentionMask& mask, Mode mode) {
    os << "n=" << mask.n << " nnz=" << mask.nnz << " mode=" << mode_tag(mode) << "\n";
    for (int i = 0; i < mask.n; ++i) {
        os << i << ":";
        for (int32_t j : mask.rows[i]) os << ' ' << j;
        os << "\n";
    }
}

}  // namespace drdiff::hsa
