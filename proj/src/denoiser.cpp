// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace drdiff::denoiser {

namespace {
constexpr double kLnEps = 1e-5;

bool param_decays(const std::string& name) {
    if (name == "head" || name == "t_embed.w") return true;
    if (name.find(".attn.w") != std::string::npos) return true;
    if (name.find(".router.w_gate") != std::string::npos) return true;
    if (name.find(".expert") != std::string::npos &&
        (name.ends_with(".w1") || name.ends_with(".w2")))
        return true;
    return false;
}
}  // namespace

void DenoiserConfig::validate() const {
    if (vocab < 2) throw std::invalid_argument("denoiser: vocab must be >= 2");
    if (d_model < 2 || d_model % 2 != 0)
        throw std::invalid_argument("denoiser: d_model must be a positive even number");
    if (heads < 1 || d_model % heads != 0)
        throw std::invalid_argument("denoiser: d_model must be divisible by heads");
    if (layers < 1) throw std::invalid_argument("denoiser: layers must be >= 1");
    if (d_ff < 2) throw std::invalid_argument("denoiser: d_ff must be >= 2");
    if (experts < 1) throw std::invalid_argument("denoiser: experts must be >= 1");
    if (top_k < 1 || top_k > experts) throw std::invalid_argument("denoiser: top_k out of range");
    hsa.validate();
    if (hsa.layers_L < layers)
        throw std::invalid_argument("denoiser: hsa.layers_L must cover the layer count");
}

DenoiserParams init_params(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    DenoiserParams p;
    p.cfg = cfg;
    const int d = cfg.d_model;
    // Unit-scale embeddings keep the latent magnitude comparable to the
    // injected noise.
    p.embed = gaussian(rng, cfg.vocab, d);
    p.t_w = gaussian(rng, d, d) * (1.0 / std::sqrt(static_cast<double>(d)));
    p.t_b = Mat::zeros(1, d);
    for (int l = 0; l < cfg.layers; ++l) {
        LayerParams lp;
        lp.ln1_scale = Mat::filled(1, d, 1.0);
        lp.ln1_shift = Mat::zeros(1, d);
        lp.attn = attn::AttnParams::init(d, cfg.heads, rng);
        lp.ln2_scale = Mat::filled(1, d, 1.0);
        lp.ln2_shift = Mat::zeros(1, d);
        lp.router = moe::RouterParams::init(d, cfg.experts, rng);
        for (int j = 0; j < cfg.experts; ++j) {
            const double cap = (j % 2 == 0) ? 1.0 : 0.5;
            lp.experts.push_back(moe::ExpertParams::init(d, cfg.d_ff, cap, rng));
        }
        p.layers.push_back(std::move(lp));
    }
    p.head = gaussian(rng, d, d) * (1.0 / std::sqrt(static_cast<double>(d)));
    p.phi = hsa::DecisionNetParams::init(d, 16, rng);
    return p;
}

DenoiserParams zero_like(const DenoiserParams& p) {
    DenoiserParams z = p;
    for_each_param(z, [](const std::string&, Mat& m) { std::fill(m.v.begin(), m.v.end(), 0.0); });
    return z;
}

namespace {
template <typename Params, typename Fn>
void walk_params(Params& p, Fn&& fn) {
    fn("embed", p.embed);
    fn("t_embed.w", p.t_w);
    fn("t_embed.b", p.t_b);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto& lp = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        fn(pre + "ln1.scale", lp.ln1_scale);
        fn(pre + "ln1.shift", lp.ln1_shift);
        fn(pre + "attn.wq", lp.attn.wq);
        fn(pre + "attn.wk", lp.attn.wk);
        fn(pre + "attn.wv", lp.attn.wv);
        fn(pre + "attn.wo", lp.attn.wo);
        fn(pre + "ln2.scale", lp.ln2_scale);
        fn(pre + "ln2.shift", lp.ln2_shift);
        fn(pre + "router.w_gate", lp.router.w_gate);
        fn(pre + "router.b_gate", lp.router.b_gate);
        for (size_t j = 0; j < lp.experts.size(); ++j) {
            const std::string ep = pre + "expert" + std::to_string(j) + ".";
            fn(ep + "w1", lp.experts[j].w1);
            fn(ep + "b1", lp.experts[j].b1);
            fn(ep + "w2", lp.experts[j].w2);
            fn(ep + "b2", lp.experts[j].b2);
        }
    }
    fn("head", p.head);
    fn("phi.w1", p.phi.w1);
    fn("phi.b1", p.phi.b1);
    fn("phi.w2", p.phi.w2);
    fn("phi.b2", p.phi.b2);
}
}  // namespace

void for_each_param(DenoiserParams& p,
                    const std::function<void(const std::string&, Mat&)>& fn) {
    walk_params(p, fn);
}

void for_each_param(const DenoiserParams& p,
                    const std::function<void(const std::string&, const Mat&)>& fn) {
    walk_params(p, fn);
}

uint64_t total_param_count(const DenoiserParams& p) {
    uint64_t n = 0;
    for_each_param(p, [&](const std::string&, const Mat& m) { n += m.size(); });
    return n;
}

uint64_t active_param_count(const DenoiserParams& p) {
    uint64_t n = total_param_count(p);
    for (const auto& lp : p.layers) {
        for (size_t j = 0; j < lp.experts.size(); ++j)
            if (static_cast<int>(j) >= p.cfg.top_k) n -= lp.experts[j].param_count();
    }
    return n;
}

std::vector<double> sinusoidal_encoding(int t, int d) {
    std::vector<double> e(d);
    for (int i = 0; i < d / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
        e[2 * i] = std::sin(t * freq);
        e[2 * i + 1] = std::cos(t * freq);
    }
    return e;
}

namespace {
void layernorm_forward(const Mat& x, const Mat& scale, const Mat& shift, Mat& xhat,
                       std::vector<double>& invstd, Mat& y) {
    const int n = x.rows, d = x.cols;
    xhat = Mat(n, d);
    y = Mat(n, d);
    invstd.assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += x.at(i, c);
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            const double z = x.at(i, c) - mean;
            var += z * z;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        invstd[i] = inv;
        for (int c = 0; c < d; ++c) {
            const double xh = (x.at(i, c) - mean) * inv;
            xhat.at(i, c) = xh;
            y.at(i, c) = xh * scale.at(0, c) + shift.at(0, c);
        }
    }
}

Mat layernorm_backward(const Mat& d_y, const Mat& xhat, const std::vector<double>& invstd,
                       const Mat& scale, Mat& d_scale, Mat& d_shift) {
    const int n = d_y.rows, d = d_y.cols;
    Mat d_x(n, d);
    for (int i = 0; i < n; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dxh = d_y.at(i, c) * scale.at(0, c);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat.at(i, c);
            d_scale.at(0, c) += d_y.at(i, c) * xhat.at(i, c);
            d_shift.at(0, c) += d_y.at(i, c);
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        for (int c = 0; c < d; ++c) {
            const double dxh = d_y.at(i, c) * scale.at(0, c);
            d_x.at(i, c) = invstd[i] * (dxh - mean_dxhat - xhat.at(i, c) * mean_dxhat_xhat);
        }
    }
    return d_x;
}

std::vector<size_t> row_offsets(const hsa::AttentionMask& mask) {
    std::vector<size_t> off(mask.n + 1, 0);
    for (int i = 0; i < mask.n; ++i) off[i + 1] = off[i] + mask.rows[i].size();
    return off;
}
}  // namespace

Mat forward_cached(const DenoiserParams& p, const LatentSeq& zt, ForwardCache& cache) {
    const DenoiserConfig& cfg = p.cfg;
    const int n = zt.z.rows;
    const int d = cfg.d_model;
    if (zt.z.cols != d) throw std::invalid_argument("denoiser forward: latent width mismatch");
    const int heads = cfg.heads;
    const int dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.t = zt.t;
    cache.t_enc = sinusoidal_encoding(zt.t, d);
    std::vector<double> temb(d);
    for (int j = 0; j < d; ++j) {
        double s = p.t_b.at(0, j);
        for (int i = 0; i < d; ++i) s += cache.t_enc[i] * p.t_w.at(i, j);
        temb[j] = s;
    }

    Mat x(n, d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) x.at(i, c) = zt.z.at(i, c) + temb[c];
    cache.x0_in = x;

    cache.layers.assign(cfg.layers, LayerCache{});
    for (int l = 0; l < cfg.layers; ++l) {
        LayerCache& lc = cache.layers[l];
        const LayerParams& lp = p.layers[l];
        lc.mask = hsa::build_hsa_mask(cfg.hsa, n, l);
        lc.x_in = x;

        layernorm_forward(x, lp.ln1_scale, lp.ln1_shift, lc.ln1_xhat, lc.ln1_invstd, lc.h1);
        lc.q = matmul(lc.h1, lp.attn.wq);
        lc.k = matmul(lc.h1, lp.attn.wk);
        lc.v = matmul(lc.h1, lp.attn.wv);

        const auto off = row_offsets(lc.mask);
        lc.concat = Mat(n, d);
        lc.attn_w.assign(heads, std::vector<double>(lc.mask.nnz, 0.0));
        std::vector<double> scores(lc.mask.max_row_len());
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            auto& wbuf = lc.attn_w[h];
            for (int i = 0; i < n; ++i) {
                const auto& row = lc.mask.rows[i];
                for (size_t s = 0; s < row.size(); ++s) {
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c)
                        acc += lc.q.at(i, c0 + c) * lc.k.at(row[s], c0 + c);
                    scores[s] = acc * inv_sqrt_dh;
                }
                softmax_row_inplace({scores.data(), row.size()});
                for (size_t s = 0; s < row.size(); ++s) {
                    wbuf[off[i] + s] = scores[s];
                    const double w = scores[s];
                    for (int c = 0; c < dh; ++c)
                        lc.concat.at(i, c0 + c) += w * lc.v.at(row[s], c0 + c);
                }
            }
        }
        const Mat attn_out = matmul(lc.concat, lp.attn.wo);
        lc.x_mid = lc.x_in + attn_out;

        layernorm_forward(lc.x_mid, lp.ln2_scale, lp.ln2_shift, lc.ln2_xhat, lc.ln2_invstd, lc.h2);
        lc.moe_out = Mat(n, d);
        lc.tokens.assign(n, moe::MoeTokenCache{});
        for (int i = 0; i < n; ++i) {
            const auto y = moe::moe_forward_cached(lc.h2.row(i), lp.router, lp.experts,
                                                   cfg.top_k, lc.tokens[i]);
            for (int c = 0; c < d; ++c) lc.moe_out.at(i, c) = y[c];
        }
        x = lc.x_mid + lc.moe_out;
    }
    cache.x_final = x;
    cache.eps = matmul(x, p.head);
    return cache.eps;
}

Mat forward(const DenoiserParams& p, const LatentSeq& zt) {
    ForwardCache cache;
    return forward_cached(p, zt, cache);
}

hsa::ModeDecision decide(const DenoiserParams& p, const LatentSeq& zt) {
    const int d = p.cfg.d_model;
    if (zt.z.cols != d) throw std::invalid_argument("decide: latent width mismatch");
    const auto enc = sinusoidal_encoding(zt.t, d);
    std::vector<double> temb(d);
    for (int j = 0; j < d; ++j) {
        double s = p.t_b.at(0, j);
        for (int i = 0; i < d; ++i) s += enc[i] * p.t_w.at(i, j);
        temb[j] = s;
    }
    std::vector<double> h_bar(d, 0.0);
    for (int i = 0; i < zt.z.rows; ++i)
        for (int c = 0; c < d; ++c) h_bar[c] += zt.z.at(i, c);
    for (int c = 0; c < d; ++c) h_bar[c] = h_bar[c] / zt.z.rows + temb[c];
    return hsa::decide_mode(p.cfg.hsa, zt.z.rows, h_bar, p.phi);
}

void backward(const DenoiserParams& p, const ForwardCache& cache, const Mat& d_eps,
              const AuxGradSpec* aux, DenoiserParams& grads, Mat* d_input) {
    const DenoiserConfig& cfg = p.cfg;
    const int n = cache.x_final.rows;
    const int d = cfg.d_model;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // head projection
    Mat d_x = matmul(d_eps, transpose(p.head));
    {
        const Mat gh = matmul(transpose(cache.x_final), d_eps);
        for (size_t i = 0; i < gh.v.size(); ++i) grads.head.v[i] += gh.v[i];
    }

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerCache& lc = cache.layers[l];
        const LayerParams& lp = p.layers[l];
        LayerParams& gl = grads.layers[l];

        // MoE sublayer: x = x_mid + moe(ln2(x_mid))
        Mat d_h2(n, d);
        for (int i = 0; i < n; ++i) {
            std::vector<double> aux_dp;
            if (aux && aux->scale != 0.0) {
                aux_dp.resize(cfg.experts);
                for (int j = 0; j < cfg.experts; ++j) aux_dp[j] = aux->scale * aux->f[l][j];
            }
            moe::moe_backward(lc.tokens[i], lp.router, lp.experts, d_x.row(i), aux_dp,
                              gl.router, gl.experts, d_h2.row(i));
        }
        const Mat d_x_mid_ln =
            layernorm_backward(d_h2, lc.ln2_xhat, lc.ln2_invstd, lp.ln2_scale, gl.ln2_scale,
                               gl.ln2_shift);
        Mat d_x_mid = d_x + d_x_mid_ln;

        // attention sublayer: x_mid = x_in + concat * wo
        const Mat& d_attn_out = d_x_mid;
        {
            const Mat gwo = matmul(transpose(lc.concat), d_attn_out);
            for (size_t i = 0; i < gwo.v.size(); ++i) gl.attn.wo.v[i] += gwo.v[i];
        }
        const Mat d_concat = matmul(d_attn_out, transpose(lp.attn.wo));

        Mat d_q(n, d), d_k(n, d), d_v(n, d);
        const auto off = row_offsets(lc.mask);
        std::vector<double> dw(lc.mask.max_row_len());
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            const auto& wbuf = lc.attn_w[h];
            for (int i = 0; i < n; ++i) {
                const auto& row = lc.mask.rows[i];
                double wdw = 0.0;
                for (size_t s = 0; s < row.size(); ++s) {
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c)
                        acc += d_concat.at(i, c0 + c) * lc.v.at(row[s], c0 + c);
                    dw[s] = acc;
                    wdw += wbuf[off[i] + s] * acc;
                }
                for (size_t s = 0; s < row.size(); ++s) {
                    const double w = wbuf[off[i] + s];
                    const double ds = w * (dw[s] - wdw) * inv_sqrt_dh;
                    for (int c = 0; c < dh; ++c) {
                        d_q.at(i, c0 + c) += ds * lc.k.at(row[s], c0 + c);
                        d_k.at(row[s], c0 + c) += ds * lc.q.at(i, c0 + c);
                        d_v.at(row[s], c0 + c) += w * d_concat.at(i, c0 + c);
                    }
                }
            }
        }
        {
            const Mat gq = matmul(transpose(lc.h1), d_q);
            const Mat gk = matmul(transpose(lc.h1), d_k);
            const Mat gv = matmul(transpose(lc.h1), d_v);
            for (size_t i = 0; i < gq.v.size(); ++i) {
                gl.attn.wq.v[i] += gq.v[i];
                gl.attn.wk.v[i] += gk.v[i];
                gl.attn.wv.v[i] += gv.v[i];
            }
        }
        Mat d_h1 = matmul(d_q, transpose(lp.attn.wq));
        {
            const Mat t1 = matmul(d_k, transpose(lp.attn.wk));
            const Mat t2 = matmul(d_v, transpose(lp.attn.wv));
            for (size_t i = 0; i < d_h1.v.size(); ++i) d_h1.v[i] += t1.v[i] + t2.v[i];
        }
        const Mat d_x_in_ln =
            layernorm_backward(d_h1, lc.ln1_xhat, lc.ln1_invstd, lp.ln1_scale, gl.ln1_scale,
                               gl.ln1_shift);
        d_x = d_x_mid + d_x_in_ln;
    }

    // timestep embedding: x0_in = z + temb (broadcast row)
    std::vector<double> d_temb(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) d_temb[c] += d_x.at(i, c);
    for (int j = 0; j < d; ++j) {
        grads.t_b.at(0, j) += d_temb[j];
        for (int i = 0; i < d; ++i) grads.t_w.at(i, j) += cache.t_enc[i] * d_temb[j];
    }
    if (d_input) *d_input = d_x;
}

TrainState init_train_state(const DenoiserConfig& cfg, uint64_t seed) {
    TrainState st;
    st.rng = Rng(seed);
    st.params = init_params(cfg, st.rng);
    st.m = zero_like(st.params);
    st.v = zero_like(st.params);
    st.step = 0;
    return st;
}

TrainMetrics train_step(TrainState& state, std::span<const TrainSample> batch,
                        const NoiseSchedule& sched, const TrainHyper& hp) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const DenoiserConfig& cfg = state.params.cfg;
    const int d = cfg.d_model;
    const int layers = cfg.layers;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    const bool use_sas = !hp.anchors.timesteps.empty() &&
                         std::any_of(hp.anchors.lambdas.begin(), hp.anchors.lambdas.end(),
                                     [](double l) { return l > 0.0; });

    std::vector<ForwardCache> caches(batch.size());
    std::vector<Mat> d_eps(batch.size());
    double loss_diff = 0.0, loss_sas = 0.0;
    size_t total_tokens = 0;

    for (size_t b = 0; b < batch.size(); ++b) {
        const TrainSample& s = batch[b];
        if (s.z0.cols != d) throw std::invalid_argument("train_step: sample width mismatch");
        LatentSeq z0{s.z0, 0};
        const LatentSeq zt = diffusion::q_sample(z0, s.t, s.eps, sched);
        const Mat eps_pred = forward_cached(state.params, zt, caches[b]);
        total_tokens += static_cast<size_t>(s.z0.rows);

        loss_diff += diffusion::diffusion_loss(s.eps, eps_pred) * inv_b;
        const double gscale = 2.0 * inv_b / static_cast<double>(eps_pred.size());
        d_eps[b] = Mat(eps_pred.rows, eps_pred.cols);
        for (size_t i = 0; i < eps_pred.v.size(); ++i)
            d_eps[b].v[i] = gscale * (eps_pred.v[i] - s.eps.v[i]);

        if (use_sas) {
            const auto built = diffusion::build_anchor_targets(
                z0, sched, hp.anchors.timesteps, hp.anchors.segment_count, hp.anchors.lambdas,
                state.rng);
            loss_sas += diffusion::sas_loss(zt, eps_pred, built.set, built.eps_prime, sched) * inv_b;
            const Mat g = diffusion::sas_loss_grad(zt, eps_pred, built.set, built.eps_prime, sched);
            for (size_t i = 0; i < g.v.size(); ++i) d_eps[b].v[i] += g.v[i] * inv_b;
        }
    }

    // Batch-level dispatch fractions and mean routing probabilities per layer.
    std::vector<std::vector<double>> f(layers, std::vector<double>(cfg.experts, 0.0));
    std::vector<std::vector<double>> pmean(layers, std::vector<double>(cfg.experts, 0.0));
    for (const auto& c : caches) {
        for (int l = 0; l < layers; ++l) {
            for (const auto& tok : c.layers[l].tokens) {
                for (int j : tok.gating.topk) f[l][j] += 1.0;
                for (int j = 0; j < cfg.experts; ++j) pmean[l][j] += tok.probs[j];
            }
        }
    }
    const double tok_norm = static_cast<double>(total_tokens);
    double loss_aux = 0.0;
    for (int l = 0; l < layers; ++l) {
        double fp = 0.0;
        for (int j = 0; j < cfg.experts; ++j) {
            f[l][j] /= tok_norm * cfg.top_k;
            pmean[l][j] /= tok_norm;
            fp += f[l][j] * pmean[l][j];
        }
        loss_aux += hp.lambda_aux * cfg.experts * fp / layers;
    }

    const double loss_total = loss_diff + loss_sas + loss_aux;
    if (!std::isfinite(loss_total)) {
        std::ostringstream os;
        os << "train_step: non-finite loss at step " << state.step << " (diffusion=" << loss_diff
           << " sas=" << loss_sas << " aux=" << loss_aux << ")";
        throw std::runtime_error(os.str());
    }

    DenoiserParams grads = zero_like(state.params);
    AuxGradSpec aux;
    aux.scale = hp.lambda_aux * cfg.experts / (tok_norm * layers);
    aux.f = f;
    const AuxGradSpec* aux_ptr = (hp.lambda_aux != 0.0) ? &aux : nullptr;
    for (size_t b = 0; b < batch.size(); ++b)
        backward(state.params, caches[b], d_eps[b], aux_ptr, grads);

    double gnorm_sq = 0.0;
    for_each_param(grads, [&](const std::string&, Mat& g) { gnorm_sq += frob_sq(g); });
    const double gnorm = std::sqrt(gnorm_sq);
    if (!std::isfinite(gnorm)) throw std::runtime_error("train_step: non-finite gradient");
    if (hp.grad_clip > 0.0 && gnorm > hp.grad_clip) {
        const double sc = hp.grad_clip / gnorm;
        for_each_param(grads, [&](const std::string&, Mat& g) {
            for (double& x : g.v) x *= sc;
        });
    }

    state.step += 1;
    const double warm =
        (hp.warmup_steps > 0)
            ? std::min(1.0, static_cast<double>(state.step) / hp.warmup_steps)
            : 1.0;
    const double lr = hp.lr * warm;

    std::vector<Mat*> tp, tm, tv, tg;
    std::vector<std::string> names;
    for_each_param(state.params, [&](const std::string& nm, Mat& t) {
        names.push_back(nm);
        tp.push_back(&t);
    });
    for_each_param(state.m, [&](const std::string&, Mat& t) { tm.push_back(&t); });
    for_each_param(state.v, [&](const std::string&, Mat& t) { tv.push_back(&t); });
    for_each_param(grads, [&](const std::string&, Mat& t) { tg.push_back(&t); });

    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < tp.size(); ++i) {
        const bool decay = param_decays(names[i]);
        Mat& theta = *tp[i];
        Mat& m = *tm[i];
        Mat& v = *tv[i];
        const Mat& g = *tg[i];
        for (size_t j = 0; j < theta.v.size(); ++j) {
            m.v[j] = hp.beta1 * m.v[j] + (1.0 - hp.beta1) * g.v[j];
            v.v[j] = hp.beta2 * v.v[j] + (1.0 - hp.beta2) * g.v[j] * g.v[j];
            const double mh = m.v[j] / bc1;
            const double vh = v.v[j] / bc2;
            theta.v[j] -= lr * mh / (std::sqrt(vh) + hp.adam_eps);
            if (decay) theta.v[j] -= lr * hp.weight_decay * theta.v[j];
        }
    }

    TrainMetrics mt;
    mt.loss_total = loss_total;
    mt.loss_diffusion = loss_diff;
    mt.loss_sas = loss_sas;
    mt.loss_aux = loss_aux;
    mt.grad_norm = gnorm;
    mt.lr = lr;
    mt.dispatch_f.assign(cfg.experts, 0.0);
    for (int l = 0; l < layers; ++l)
        for (int j = 0; j < cfg.experts; ++j) mt.dispatch_f[j] += f[l][j] / layers;
    return mt;
}

namespace {
void write_bytes(std::ostream& os, const void* p, size_t len) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
}
template <typename T>
void write_pod(std::ostream& os, T x) {
    write_bytes(os, &x, sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T x{};
    is.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return x;
}

void write_tensor_section(std::ostream& os, const DenoiserParams& p) {
    uint32_t count = 0;
    for_each_param(p, [&](const std::string&, const Mat&) { ++count; });
    write_pod(os, count);
    for_each_param(p, [&](const std::string& nm, const Mat& m) {
        write_pod(os, static_cast<uint16_t>(nm.size()));
        write_bytes(os, nm.data(), nm.size());
        write_pod(os, static_cast<int32_t>(m.rows));
        write_pod(os, static_cast<int32_t>(m.cols));
        write_bytes(os, m.v.data(), m.v.size() * sizeof(double));
    });
}

void read_tensor_section(std::istream& is, DenoiserParams& p) {
    const uint32_t count = read_pod<uint32_t>(is);
    uint32_t expected = 0;
    for_each_param(p, [&](const std::string&, const Mat&) { ++expected; });
    if (count != expected) throw std::runtime_error("checkpoint: tensor count mismatch");
    for_each_param(p, [&](const std::string& nm, Mat& m) {
        const uint16_t len = read_pod<uint16_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (name != nm) throw std::runtime_error("checkpoint: tensor name mismatch: " + name);
        const int32_t rows = read_pod<int32_t>(is);
        const int32_t cols = read_pod<int32_t>(is);
        if (rows != m.rows || cols != m.cols)
            throw std::runtime_error("checkpoint: tensor shape mismatch: " + name);
        is.read(reinterpret_cast<char*>(m.v.data()),
                static_cast<std::streamsize>(m.v.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor: " + name);
    });
}

constexpr uint32_t kCkptMagic = 0x46445244;  // "DRDF"
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const TrainState& state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    write_pod(os, kCkptMagic);
    write_pod(os, kCkptVersion);
    const DenoiserConfig& c = state.params.cfg;
    for (int x : {c.vocab, c.d_model, c.heads, c.layers, c.d_ff, c.experts, c.top_k})
        write_pod(os, static_cast<int32_t>(x));
    const hsa::HSAConfig& h = c.hsa;
    for (int x : {h.n1, h.n2, h.n3, h.w4k, h.w8k, h.stride_s, h.layers_L, h.w16k, h.s_meta,
                  h.anchor_cap, h.scale_c})
        write_pod(os, static_cast<int32_t>(x));
    write_pod(os, h.rho);
    write_pod(os, static_cast<int64_t>(state.step));
    write_pod(os, state.rng.seed());
    write_pod(os, state.rng.counter());
    write_tensor_section(os, state.params);
    write_tensor_section(os, state.m);
    write_tensor_section(os, state.v);
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    if (read_pod<uint32_t>(is) != kCkptMagic) throw std::runtime_error("checkpoint: bad magic");
    if (read_pod<uint32_t>(is) != kCkptVersion) throw std::runtime_error("checkpoint: bad version");
    DenoiserConfig c;
    c.vocab = read_pod<int32_t>(is);
    c.d_model = read_pod<int32_t>(is);
    c.heads = read_pod<int32_t>(is);
    c.layers = read_pod<int32_t>(is);
    c.d_ff = read_pod<int32_t>(is);
    c.experts = read_pod<int32_t>(is);
    c.top_k = read_pod<int32_t>(is);
    hsa::HSAConfig& h = c.hsa;
    h.n1 = read_pod<int32_t>(is);
    h.n2 = read_pod<int32_t>(is);
    h.n3 = read_pod<int32_t>(is);
    h.w4k = read_pod<int32_t>(is);
    h.w8k = read_pod<int32_t>(is);
    h.stride_s = read_pod<int32_t>(is);
    h.layers_L = read_pod<int32_t>(is);
    h.w16k = read_pod<int32_t>(is);
    h.s_meta = read_pod<int32_t>(is);
    h.anchor_cap = read_pod<int32_t>(is);
    h.scale_c = read_pod<int32_t>(is);
    h.rho = read_pod<double>(is);

    const int64_t step = read_pod<int64_t>(is);
    const uint64_t seed = read_pod<uint64_t>(is);
    const uint64_t counter = read_pod<uint64_t>(is);

    TrainState st;
    st.rng = Rng(seed, counter);
    Rng scratch(0);
    st.params = init_params(c, scratch);
    st.m = zero_like(st.params);
    st.v = zero_like(st.params);
    st.step = step;
    read_tensor_section(is, st.params);
    read_tensor_section(is, st.m);
    read_tensor_section(is, st.v);
    return st;
}

std::vector<int> round_to_tokens(const Mat& z, const Mat& embed) {
    if (z.cols != embed.cols) throw std::invalid_argument("round_to_tokens: width mismatch");
    std::vector<int> ids(z.rows, 0);
    for (int i = 0; i < z.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int t = 0; t < embed.rows; ++t) {
            double dist = 0.0;
            for (int c = 0; c < z.cols; ++c) {
                const double d = z.at(i, c) - embed.at(t, c);
                dist += d * d;
            }
            if (dist < best) {
                best = dist;
                arg = t;
            }
        }
        ids[i] = arg;
    }
    return ids;
}

}  // namespace drdiff::denoiser
