// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "drdiff/numerics.hpp"

namespace drdiff::moe {

struct RouterParams {
    Mat w_gate;  // d_model x M
    Mat b_gate;  // 1 x M

    int experts() const { return w_gate.cols; }
    void validate() const;
    static RouterParams init(int d_model, int experts, Rng& rng);
};

/// One feed-forward expert. capacity_mult scales the hidden width, realizing
/// the cheap/full expert split (0.5 or 1.0 times d_ff).
struct ExpertParams {
    Mat w1;  // d_model x d_hidden
    Mat b1;  // 1 x d_hidden
    Mat w2;  // d_hidden x d_model
    Mat b2;  // 1 x d_model
    double capacity_mult = 1.0;

    int d_hidden() const { return w1.cols; }
    uint64_t param_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
    void validate() const;
    static ExpertParams init(int d_model, int d_ff, double capacity_mult, Rng& rng);
};

struct GatingOutput {
    std::vector<double> logits;   // raw router logits, length M
    std::vector<int> topk;        // selected expert indices, ascending
    std::vector<double> weights;  // length M; exactly k nonzeros summing to 1
};

struct LoadStats {
    std::vector<double> f;  // dispatch fractions, sum 1
    std::vector<double> p;  // mean routing probabilities, sum 1
    double lambda_aux = 0.01;
};

/// Router logits W_gate^T h + b_gate. The router input is treated as
/// stop-gradient: callers backpropagating through a MoE layer must not route
/// any gradient into h via this path.
std::vector<double> route(std::span<const double> h, const RouterParams& p);

/// Softmax restricted to the k largest logits; ties break toward the lower
/// index; all other weights are exactly zero. Throws when k is out of range.
GatingOutput topk_gate(std::span<const double> logits, int k);

/// w2 * relu(w1 * h + b1) + b2. Increments the expert evaluation counter.
std::vector<double> expert_forward(std::span<const double> h, const ExpertParams& e);

/// Weighted combination over exactly the k selected experts; unselected
/// experts are never evaluated.
std::pair<std::vector<double>, GatingOutput> moe_forward(std::span<const double> h,
                                                         const RouterParams& router,
                                                         std::span<const ExpertParams> experts,
                                                         int k);

/// Dispatch fractions and mean routing probabilities over a batch of gatings.
LoadStats compute_load_stats(std::span<const GatingOutput> gatings, int experts, int k,
                             double lambda_aux);

/// lambda_aux * M * sum_j f_j * p_j; equals lambda_aux exactly under uniform
/// routing (the M factor is the normalization making that so).
double load_balance_loss(const LoadStats& stats);

/// Instrumentation for the "only k experts run" contract.
uint64_t expert_eval_count();
void reset_expert_eval_count();

/// Activations one token kept for the hand-written backward pass.
struct MoeTokenCache {
    GatingOutput gating;
    std::vector<double> probs;                // full softmax of logits
    std::vector<double> input;                // token input h
    std::vector<std::vector<double>> hidden;  // per selected expert, post-relu
    std::vector<std::vector<double>> out;     // per selected expert output
};

std::vector<double> moe_forward_cached(std::span<const double> h, const RouterParams& router,
                                       std::span<const ExpertParams> experts, int k,
                                       MoeTokenCache& cache);

/// Reverse pass for one token. Honors the router stop-gradient: dh receives
/// contributions only through the selected experts, never through the logits.
/// aux_dp, when non-empty, is dL/dP for this token's routing probabilities
/// (the load-balancing path) and is pushed through the softmax into the
/// router gradients. Gradient accumulators share the parameter shapes.
void moe_backward(const MoeTokenCache& cache, const RouterParams& router,
                  std::span<const ExpertParams> experts, std::span<const double> dy,
                  std::span<const double> aux_dp, RouterParams& d_router,
                  std::vector<ExpertParams>& d_experts, std::span<double> dh);

}  // namespace drdiff::moe
