// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "drdiff/hsa.hpp"
#include "drdiff/numerics.hpp"

namespace drdiff::attn {

struct AttnParams {
    int d_model = 0;
    int heads = 1;
    Mat wq, wk, wv, wo;  // each d_model x d_model

    int d_head() const { return d_model / heads; }
    void validate() const;
    static AttnParams init(int d_model, int heads, Rng& rng);
};

struct HybridMixParams {
    double beta = 0.0;
};

/// Scaled-dot-product attention evaluated only over the mask's allowed pairs.
/// Q, K, V carry one head (d_head columns); rows match mask.n. Disallowed
/// pairs contribute exactly zero. Throws std::invalid_argument on shape
/// mismatch.
Mat masked_attention(const Mat& q, const Mat& k, const Mat& v, const hsa::AttentionMask& mask);

/// Peak number of doubles the most recent masked_attention call held beyond
/// its inputs (output plus per-row score scratch). Lets tests pin the
/// working set to O(nnz + n*d) rather than O(n^2).
size_t last_attention_workspace_doubles();

/// One row of sparse attention weights: parallel cols/weights arrays.
struct SparseRowWeights {
    std::vector<int32_t> cols;
    std::vector<double> w;
};

/// Position-aware convex mix of local and global weight rows for query i:
/// alpha(j) = sigmoid(beta * (j - i)) weights the local operand. The result
/// covers the union support and is renormalized to sum 1.
SparseRowWeights hybrid_mix(const SparseRowWeights& local, const SparseRowWeights& global, int i,
                            const HybridMixParams& p);

/// Attention with the 16K+ hybrid weighting: per-row softmax on each sub-mask,
/// hybrid_mix of the two weight rows, then the weighted value sum.
Mat hybrid_masked_attention(const Mat& q, const Mat& k, const Mat& v,
                            const hsa::AttentionMask& local_mask,
                            const hsa::AttentionMask& global_mask, const HybridMixParams& p);

/// Closed-form multiply-add count: 2 * nnz * d_head * heads for the masked
/// score/value passes plus 4 * n * d_model^2 for the Q/K/V/O projections.
uint64_t flop_account(const hsa::AttentionMask& mask, int d_model, int heads);

}  // namespace drdiff::attn
