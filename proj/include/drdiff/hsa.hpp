// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "drdiff/numerics.hpp"

namespace drdiff::hsa {

/// Length-bracketed attention mode. Brackets are half-open (lo, hi]:
/// Dense covers n <= n1, 4K covers (n1, n2], 8K covers (n2, n3],
/// 16K+ covers n > n3.
enum class Mode { Dense = 0, FourK = 1, EightK = 2, SixteenKPlus = 3 };

const char* mode_tag(Mode m);  // "Dense", "4K", "8K", "16K+"

struct HSAConfig {
    int n1 = 512;
    int n2 = 4096;
    int n3 = 8192;
    int w4k = 256;       // local half-window for the 4K bracket
    int w8k = 512;       // dilated window for the 8K bracket
    int stride_s = 4;    // dilation stride for the 8K bracket
    int layers_L = 2;    // layer count for per-layer dilation
    int w16k = 1024;     // super-window for the 16K+ lattice
    int s_meta = 8;      // meta-stride for the 16K+ lattice
    double rho = 0.05;   // key-token ratio
    int anchor_cap = 512;
    int scale_c = 4;     // constant in W_g(N)

    void validate() const;  // throws std::invalid_argument on bad fields
};

/// Row-sparse boolean allow-set. rows[i] holds the sorted allowed column
/// indices for query i; every row contains i itself.
struct AttentionMask {
    int n = 0;
    std::vector<std::vector<int32_t>> rows;
    uint64_t nnz = 0;

    void recount();        // recompute nnz from rows
    void validate() const; // throws std::logic_error when invariants fail
    int max_row_len() const;
};

struct ModeDecision {
    std::vector<double> probs;  // pi over {Dense, 4K, 8K, 16K+}
    Mode active = Mode::Dense;
};

/// 2-layer perceptron deciding mode preferences from the mean hidden state.
struct DecisionNetParams {
    Mat w1;  // dim x hidden
    Mat b1;  // 1 x hidden
    Mat w2;  // hidden x 4
    Mat b2;  // 1 x 4

    static DecisionNetParams init(int dim, int hidden, Rng& rng);
};

AttentionMask mask_dense(int n);
AttentionMask mask_local(int n, int w);
AttentionMask mask_dilated(int n, int w, int stride, int dilation);
/// Symmetric global mask: every row sees the local band and all anchors;
/// anchor rows see every column.
AttentionMask mask_global(int n, const std::vector<int32_t>& anchors, int local_w);

/// min(ceil(rho * n), cap, n) evenly spaced anchors floor(n * m / A).
std::vector<int32_t> pick_anchors(int n, double rho, int anchor_cap);
/// m evenly spaced positions floor(n * j / m), deduplicated.
std::vector<int32_t> evenly_spaced(int n, int m);

AttentionMask union_masks(const AttentionMask& a, const AttentionMask& b);

Mode mode_for_length(const HSAConfig& cfg, int n);
/// Per-layer dilation factor, cycling {1, 2, 4, 8}.
int layer_dilation(int layer_index);

/// The full length-adaptive construction.
AttentionMask build_hsa_mask(const HSAConfig& cfg, int n, int layer_index);

ModeDecision decide_mode(const HSAConfig& cfg, int n, std::span<const double> h_bar,
                         const DecisionNetParams& phi);

/// Least-squares slope of log y against log x. Throws with fewer than 3 points.
double fit_loglog_slope(const std::vector<std::pair<double, double>>& points);
/// Builds HSA masks at the given lengths (layer 0) and fits log nnz vs log n.
double nnz_scaling_fit(const HSAConfig& cfg, const std::vector<int>& lengths);

/// Reported global span W_g(N) = min(N, c * N / log2 N).
double wg_span(const HSAConfig& cfg, int n);

/// Dump format: "n=<n> nnz=<nnz> mode=<tag>" then "<row>: <cols...>" per row.
void write_mask_dump(std::ostream& os, const AttentionMask& mask, Mode mode);

}  // namespace drdiff::hsa
