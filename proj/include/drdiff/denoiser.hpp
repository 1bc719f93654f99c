// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "drdiff/attention.hpp"
#include "drdiff/diffusion.hpp"
#include "drdiff/hsa.hpp"
#include "drdiff/moe.hpp"
#include "drdiff/numerics.hpp"

namespace drdiff::denoiser {

using diffusion::LatentSeq;
using diffusion::NoiseSchedule;

struct DenoiserConfig {
    int vocab = 256;
    int d_model = 32;
    int heads = 2;
    int layers = 2;
    int d_ff = 64;
    int experts = 4;  // M
    int top_k = 2;    // k
    hsa::HSAConfig hsa;

    void validate() const;
};

struct LayerParams {
    Mat ln1_scale, ln1_shift;  // 1 x d
    attn::AttnParams attn;
    Mat ln2_scale, ln2_shift;
    moe::RouterParams router;
    std::vector<moe::ExpertParams> experts;
};

/// All tensors of the noise-prediction network. Expert capacities alternate
/// [1.0, 0.5, ...] so half the experts run a narrower hidden layer.
struct DenoiserParams {
    DenoiserConfig cfg;
    Mat embed;  // vocab x d
    Mat t_w;    // d x d, affine over the sinusoidal timestep encoding
    Mat t_b;    // 1 x d
    std::vector<LayerParams> layers;
    Mat head;  // d x d output projection
    hsa::DecisionNetParams phi;
};

DenoiserParams init_params(const DenoiserConfig& cfg, Rng& rng);
DenoiserParams zero_like(const DenoiserParams& p);

/// Deterministic iteration over every named parameter tensor.
void for_each_param(DenoiserParams& p,
                    const std::function<void(const std::string&, Mat&)>& fn);
void for_each_param(const DenoiserParams& p,
                    const std::function<void(const std::string&, const Mat&)>& fn);

uint64_t total_param_count(const DenoiserParams& p);
/// Parameters touched per token: everything shared plus the first top_k
/// experts per layer (a routing-independent representative selection; the
/// capacity pattern repeats, so this is constant in the expert count).
uint64_t active_param_count(const DenoiserParams& p);

std::vector<double> sinusoidal_encoding(int t, int d);

struct LayerCache {
    hsa::AttentionMask mask;
    Mat x_in;
    Mat ln1_xhat;
    std::vector<double> ln1_invstd;
    Mat h1, q, k, v;
    std::vector<std::vector<double>> attn_w;  // [head], flattened along mask rows
    Mat concat;
    Mat x_mid;
    Mat ln2_xhat;
    std::vector<double> ln2_invstd;
    Mat h2;
    std::vector<moe::MoeTokenCache> tokens;
    Mat moe_out;
};

struct ForwardCache {
    int t = 0;
    std::vector<double> t_enc;
    Mat x0_in;
    std::vector<LayerCache> layers;
    Mat x_final;
    Mat eps;
};

/// eps_theta(z_t, t): timestep-conditioned pre-norm transformer with
/// HSA-masked attention and MoE feed-forward sublayers.
Mat forward(const DenoiserParams& p, const LatentSeq& zt);
Mat forward_cached(const DenoiserParams& p, const LatentSeq& zt, ForwardCache& cache);

/// Mode decision for this input: mean hidden state through the phi net.
hsa::ModeDecision decide(const DenoiserParams& p, const LatentSeq& zt);

/// Load-balancing gradient wiring for backward: for layer l and every token,
/// dL/dP_j = scale * f[l][j] (f is the batch dispatch fraction vector).
struct AuxGradSpec {
    double scale = 0.0;
    std::vector<std::vector<double>> f;
};

/// Full reverse-mode gradients for every parameter given d(loss)/d(eps).
/// Honors the router stop-gradient and leaves unselected experts untouched.
/// d_input, when non-null, receives d(loss)/d(z_t).
void backward(const DenoiserParams& p, const ForwardCache& cache, const Mat& d_eps,
              const AuxGradSpec* aux, DenoiserParams& grads, Mat* d_input = nullptr);

struct TrainSample {
    Mat z0;
    int t = 1;
    Mat eps;
};

struct AnchorSpec {
    std::vector<int> timesteps;
    std::vector<double> lambdas;
    int segment_count = 1;
};

struct TrainHyper {
    double lr = 1e-4;
    int warmup_steps = 5000;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double lambda_aux = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    AnchorSpec anchors;
};

struct TrainMetrics {
    double loss_total = 0.0;
    double loss_diffusion = 0.0;
    double loss_sas = 0.0;
    double loss_aux = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    std::vector<double> dispatch_f;  // mean over layers
};

struct TrainState {
    DenoiserParams params;
    DenoiserParams m;  // first-moment accumulators, parameter shapes
    DenoiserParams v;  // second-moment accumulators
    int64_t step = 0;
    Rng rng{0};
};

TrainState init_train_state(const DenoiserConfig& cfg, uint64_t seed);

/// One optimizer step over the batch: total loss = L_diffusion + L_SAS +
/// L_aux, global-norm clip, then the adaptive-moment update with decoupled
/// decay and linear warmup. Throws std::runtime_error with a diagnostic when
/// the loss goes non-finite.
TrainMetrics train_step(TrainState& state, std::span<const TrainSample> batch,
                        const NoiseSchedule& sched, const TrainHyper& hp);

/// Versioned binary container holding params, both moment accumulators, the
/// step count and the rng state. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

/// Nearest-neighbor rounding from continuous rows back to token ids.
std::vector<int> round_to_tokens(const Mat& z, const Mat& embed);

}  // namespace drdiff::denoiser
