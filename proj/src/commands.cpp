// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "drdiff/attention.hpp"
#include "drdiff/sampler.hpp"

namespace drdiff::harness {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

std::string fmt_g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

namespace {
std::ofstream open_out(const std::string& out_dir, const std::string& name) {
    fs::create_directories(out_dir);
    const fs::path p = fs::path(out_dir) / name;
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open output file " + p.string());
    return os;
}

double to_ms(Clock::duration d) {
    return std::chrono::duration<double, std::milli>(d).count();
}

/// Median of `reps` timed runs with one discarded warmup; 0 when timing is off.
template <typename F>
double timed_ms(bool timing, int reps, F&& body) {
    if (!timing) {
        body();
        return 0.0;
    }
    body();  // warmup
    std::vector<double> ms;
    ms.reserve(reps);
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        body();
        ms.push_back(to_ms(Clock::now() - t0));
    }
    std::sort(ms.begin(), ms.end());
    return ms[ms.size() / 2];
}

denoiser::TrainHyper hyper_from(const RunConfig& cfg, int seq_len) {
    denoiser::TrainHyper hp;
    hp.lr = cfg.train.lr;
    hp.warmup_steps = cfg.train.warmup_steps;
    hp.weight_decay = cfg.train.weight_decay;
    hp.grad_clip = cfg.train.grad_clip;
    hp.lambda_aux = cfg.train.lambda_aux;
    hp.anchors = cfg.anchor_spec(seq_len);
    return hp;
}

/// Token ids -> embedding rows, cycling when the sequence is shorter than n.
Mat embed_sequence(const Mat& embed, const std::vector<int>& seq, int n) {
    Mat z(n, embed.cols);
    for (int i = 0; i < n; ++i) {
        const int id = seq[i % seq.size()];
        for (int c = 0; c < embed.cols; ++c) z.at(i, c) = embed.at(id, c);
    }
    return z;
}

denoiser::TrainSample draw_sample(const Corpus& corpus, const Mat& embed, int n, int steps,
                                  Rng& rng) {
    denoiser::TrainSample s;
    const size_t idx = rng.next_u64() % corpus.sequences.size();
    s.z0 = embed_sequence(embed, corpus.sequences[idx], n);
    s.t = 1 + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(steps));
    s.eps = gaussian(rng, n, embed.cols);
    return s;
}

struct TrainRunResult {
    denoiser::TrainMetrics last;
    double wall_ms = 0.0;
};

TrainRunResult run_training(denoiser::TrainState& state, const Corpus& corpus,
                            const diffusion::NoiseSchedule& sched,
                            const denoiser::TrainHyper& hp, int steps, int batch, int seq_len,
                            std::ostream* metrics_csv, int log_every, bool timing) {
    TrainRunResult res;
    const auto t0 = Clock::now();
    for (int step = 0; step < steps; ++step) {
        std::vector<denoiser::TrainSample> samples;
        samples.reserve(batch);
        for (int b = 0; b < batch; ++b)
            samples.push_back(
                draw_sample(corpus, state.params.embed, seq_len, sched.steps, state.rng));
        res.last = denoiser::train_step(state, samples, sched, hp);
        if (metrics_csv && (log_every > 0) && ((step + 1) % log_every == 0 || step + 1 == steps)) {
            *metrics_csv << state.step << ',' << fmt_g17(res.last.loss_total) << ','
                         << fmt_g17(res.last.loss_diffusion) << ',' << fmt_g17(res.last.loss_sas)
                         << ',' << fmt_g17(res.last.loss_aux) << ','
                         << fmt_g17(res.last.grad_norm) << ',' << fmt_g17(res.last.lr);
            for (double f : res.last.dispatch_f) *metrics_csv << ',' << fmt_g17(f);
            *metrics_csv << '\n';
        }
    }
    res.wall_ms = timing ? to_ms(Clock::now() - t0) : 0.0;
    return res;
}

Corpus corpus_for(const RunConfig& cfg) {
    if (!cfg.train.corpus_path.empty()) {
        Corpus c = ingest(cfg.train.corpus_path, cfg.train.vocab_path);
        if (c.vocab_size() > cfg.model.vocab)
            throw ConfigError("corpus vocab exceeds model.vocab (" +
                              std::to_string(c.vocab_size()) + " > " +
                              std::to_string(cfg.model.vocab) + ")");
        return c;
    }
    return make_synthetic_corpus(cfg.model.vocab, 32, std::max(cfg.train.seq_len, 8), cfg.seed);
}

std::string train_csv_header(int experts) {
    std::string h = "step,loss_total,loss_diffusion,loss_sas,loss_aux,grad_norm,lr";
    for (int j = 0; j < experts; ++j) h += ",f_" + std::to_string(j);
    return h + "\n";
}
}  // namespace

Corpus make_synthetic_corpus(int vocab, int n_sequences, int seq_len, uint64_t seed) {
    Rng rng = Rng(seed).derive(0x5eedc0);
    Corpus c;
    c.vocab.reserve(vocab);
    for (int i = 0; i < vocab; ++i) {
        c.vocab.push_back("tok" + std::to_string(i));
        c.token_to_id.emplace(c.vocab.back(), i);
    }
    for (int s = 0; s < n_sequences; ++s) {
        std::vector<int> seq(seq_len);
        for (int& id : seq) id = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(vocab));
        c.sequences.push_back(std::move(seq));
    }
    return c;
}

void cmd_build_mask(const RunConfig& cfg, const std::string& out_dir) {
    const auto mask = hsa::build_hsa_mask(cfg.model.hsa, cfg.mask_n, cfg.mask_layer);
    const auto mode = hsa::mode_for_length(cfg.model.hsa, cfg.mask_n);
    auto os = open_out(out_dir, "mask_n" + std::to_string(cfg.mask_n) + "_l" +
                                    std::to_string(cfg.mask_layer) + ".txt");
    hsa::write_mask_dump(os, mask, mode);
}

void cmd_train(const RunConfig& cfg, const std::string& out_dir) {
    const auto sched = diffusion::make_schedule(cfg.schedule_kind, cfg.schedule_steps);
    const Corpus corpus = corpus_for(cfg);
    denoiser::TrainState state = cfg.train.checkpoint_in.empty()
                                     ? denoiser::init_train_state(cfg.model, cfg.seed)
                                     : denoiser::load_checkpoint(cfg.train.checkpoint_in);

    auto metrics = open_out(out_dir, "train.csv");
    metrics << train_csv_header(cfg.model.experts);
    const auto hp = hyper_from(cfg, cfg.train.seq_len);
    run_training(state, corpus, sched, hp, cfg.train.steps, cfg.train.batch, cfg.train.seq_len,
                 &metrics, cfg.train.log_every, cfg.timing);

    denoiser::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), state);

    auto report = open_out(out_dir, "params.csv");
    report << "total_params,active_params\n"
           << denoiser::total_param_count(state.params) << ','
           << denoiser::active_param_count(state.params) << '\n';
}

void cmd_sample(const RunConfig& cfg, const std::string& out_dir) {
    const auto sched = diffusion::make_schedule(cfg.schedule_kind, cfg.schedule_steps);
    denoiser::TrainState state = cfg.sample.checkpoint.empty()
                                     ? denoiser::init_train_state(cfg.model, cfg.seed)
                                     : denoiser::load_checkpoint(cfg.sample.checkpoint);
    const denoiser::DenoiserParams& params = state.params;

    sampler::SamplerConfig scfg;
    scfg.order = cfg.sample.order;
    scfg.timestep_grid = sampler::make_grid(sched, cfg.sample.steps, cfg.sample.grid);

    const sampler::DenoiserFn fn = [&](const Mat& z, int t) {
        return denoiser::forward(params, diffusion::LatentSeq{z, t});
    };

    auto dump = open_out(out_dir, "samples.txt");
    auto csv = open_out(out_dir, "sample.csv");
    csv << "index,steps,order,ms\n";
    Rng base(cfg.seed);
    for (int i = 0; i < cfg.sample.count; ++i) {
        Rng rng = base.derive(1000 + static_cast<uint64_t>(i));
        Mat z;
        const double ms = timed_ms(cfg.timing, 1, [&] {
            Rng local = rng;  // identical draw stream per repetition
            z = sampler::sample(fn, cfg.sample.seq_len, cfg.model.d_model, scfg, sched, local);
        });
        const auto ids = denoiser::round_to_tokens(z, params.embed);
        for (size_t j = 0; j < ids.size(); ++j) dump << (j ? " " : "") << ids[j];
        dump << '\n';
        csv << i << ',' << scfg.steps() << ',' << scfg.order << ',' << fmt_g17(ms) << '\n';
    }
}

void cmd_bench(const RunConfig& cfg, const std::string& out_dir) {
    const hsa::HSAConfig& h = cfg.model.hsa;
    {
        bool has_4k = false, has_16k = false;
        for (int n : cfg.bench.lengths) {
            const auto m = hsa::mode_for_length(h, n);
            has_4k |= (m == hsa::Mode::FourK);
            has_16k |= (m == hsa::Mode::SixteenKPlus);
        }
        if (!has_4k || !has_16k)
            throw ConfigError("bench: lengths must span the 4K and 16K+ brackets");
    }

    auto csv = open_out(out_dir, "bench.csv");
    csv << "length,mode,nnz,flops,ms\n";
    const int d_head = cfg.bench.d_model / cfg.bench.heads;
    std::map<hsa::Mode, std::vector<std::pair<double, double>>> per_mode;
    Rng rng = Rng(cfg.seed).derive(0xbe7c);

    for (int n : cfg.bench.lengths) {
        const auto mode = hsa::mode_for_length(h, n);
        const auto mask = hsa::build_hsa_mask(h, n, 0);
        const uint64_t flops = attn::flop_account(mask, cfg.bench.d_model, cfg.bench.heads);

        const Mat q = gaussian(rng, n, d_head);
        const Mat k = gaussian(rng, n, d_head);
        const Mat v = gaussian(rng, n, d_head);
        const double ms = timed_ms(cfg.timing, cfg.bench.reps, [&] {
            for (int head = 0; head < cfg.bench.heads; ++head) attn::masked_attention(q, k, v, mask);
        });
        per_mode[mode].emplace_back(static_cast<double>(n), static_cast<double>(mask.nnz));
        csv << n << ',' << hsa::mode_tag(mode) << ',' << mask.nnz << ',' << flops << ','
            << fmt_g17(ms) << '\n';
    }

    auto fit = open_out(out_dir, "bench_fit.csv");
    fit << "mode,points,nnz_exponent\n";
    for (const auto& [mode, pts] : per_mode) {
        if (pts.size() < 3) continue;
        fit << hsa::mode_tag(mode) << ',' << pts.size() << ','
            << fmt_g17(hsa::fit_loglog_slope(pts)) << '\n';
    }
}

void cmd_ablate(const RunConfig& cfg, const std::string& out_dir) {
    struct Toggle {
        std::string name;
        bool hsa_on = true;
        bool des_on = true;
        int steps = 0;   // 0: config default
        int window = 0;  // 0: config default
    };
    std::vector<Toggle> toggles = {{"baseline", true, true, 0, 0},
                                   {"no_hsa", false, true, 0, 0},
                                   {"no_des", true, false, 0, 0},
                                   {"no_both", false, false, 0, 0}};
    for (int s : cfg.ablate.steps_list) toggles.push_back({"steps_" + std::to_string(s), true, true, s, 0});
    for (int w : cfg.ablate.windows) toggles.push_back({"window_" + std::to_string(w), true, true, 0, w});

    auto csv = open_out(out_dir, "ablate.csv");
    csv << "toggle,steps,window,nnz,flops,loss,ms\n";

    int cell = 0;
    for (const auto& tg : toggles) {
        RunConfig c = cfg;
        c.seed = Rng(cfg.seed).derive(7000 + static_cast<uint64_t>(cell)).seed();
        if (tg.steps > 0) c.schedule_steps = tg.steps;
        if (tg.window > 0) {
            c.model.hsa.w4k = tg.window;
            c.model.hsa.w8k = tg.window;
        }
        if (!tg.des_on) {
            // plain MoE: uniform full-capacity experts, same fixed top-2 routing
            // (capacity differentiation is the DES ingredient being removed)
        }

        // Mask accounting at the ablation length.
        hsa::AttentionMask mask = tg.hsa_on
                                      ? hsa::build_hsa_mask(c.model.hsa, cfg.ablate.seq_len, 0)
                                      : hsa::mask_local(cfg.ablate.seq_len, 256);
        const uint64_t flops = attn::flop_account(mask, cfg.model.d_model, cfg.model.heads);

        // Smoke-train budget with the toggled configuration.
        const auto sched = diffusion::make_schedule(c.schedule_kind, c.schedule_steps);
        const Corpus corpus = make_synthetic_corpus(c.model.vocab, 16, cfg.ablate.train_seq_len,
                                                    c.seed);
        denoiser::TrainState state = denoiser::init_train_state(c.model, c.seed);
        if (!tg.des_on) {
            Rng er(Rng(c.seed).derive(0xde5));
            for (auto& lp : state.params.layers)
                for (auto& e : lp.experts)
                    e = moe::ExpertParams::init(c.model.d_model, c.model.d_ff, 1.0, er);
            state.m = denoiser::zero_like(state.params);
            state.v = denoiser::zero_like(state.params);
        }
        auto hp = hyper_from(c, cfg.ablate.train_seq_len);
        TrainRunResult res;
        const double ms = timed_ms(cfg.timing, 1, [&] {
            denoiser::TrainState run_state = state;
            res = run_training(run_state, corpus, sched, hp, cfg.ablate.train_steps, 1,
                               cfg.ablate.train_seq_len, nullptr, 0, false);
        });
        csv << tg.name << ',' << c.schedule_steps << ','
            << (tg.window > 0 ? tg.window : c.model.hsa.w8k) << ',' << mask.nnz << ',' << flops
            << ',' << fmt_g17(res.last.loss_total) << ',' << fmt_g17(ms) << '\n';
        ++cell;
    }
}

void cmd_sweep(const RunConfig& cfg, const std::string& out_dir) {
    auto csv = open_out(out_dir, "sweep.csv");
    csv << "kind,steps,lambda_sas,final_loss,final_loss_sas,moment_mean_err,moment_var_err,"
           "gen_ms,diversity\n";

    int cell = 0;
    for (const auto& kind_name : cfg.sweep.kinds) {
        const auto kind = diffusion::schedule_kind_from_string(kind_name);
        for (int steps : cfg.sweep.steps_list) {
            const auto sched = diffusion::make_schedule(kind, steps);
            {
                auto sos = open_out(out_dir, "schedule_" + kind_name + "_" +
                                                 std::to_string(steps) + ".csv");
                diffusion::write_schedule_csv(sos, sched);
            }
            for (double lam : cfg.sweep.lambda_sas_list) {
                RunConfig c = cfg;
                c.schedule_kind = kind;
                c.schedule_steps = steps;
                c.train.lambda_sas = {lam};
                c.train.anchor_timesteps.clear();
                const uint64_t cell_seed =
                    Rng(cfg.seed).derive(9000 + static_cast<uint64_t>(cell)).seed();

                const Corpus corpus =
                    make_synthetic_corpus(c.model.vocab, 16, cfg.sweep.seq_len, cell_seed);
                denoiser::TrainState state = denoiser::init_train_state(c.model, cell_seed);
                auto hp = hyper_from(c, cfg.sweep.seq_len);
                const auto res = run_training(state, corpus, sched, hp, cfg.sweep.train_steps, 1,
                                              cfg.sweep.seq_len, nullptr, 0, false);

                // Analytic-sampler moment error on this schedule.
                const auto oracle = sampler::analytic_gaussian_denoiser(sched);
                sampler::SamplerConfig scfg;
                scfg.order = 2;
                scfg.timestep_grid = sampler::make_grid(
                    sched, std::min(cfg.sample.steps, steps), sampler::GridKind::Trig);
                double mean = 0.0, var = 0.0;
                size_t count = 0;
                Rng mrng = Rng(cell_seed).derive(0x303);
                for (int rep = 0; rep < 200; ++rep) {
                    const Mat z = sampler::sample(oracle, 1, 16, scfg, sched, mrng);
                    for (double x : z.v) {
                        mean += x;
                        var += x * x;
                        ++count;
                    }
                }
                mean /= static_cast<double>(count);
                var = var / static_cast<double>(count) - mean * mean;

                // Generation time and diversity proxy from the trained model.
                const sampler::DenoiserFn fn = [&](const Mat& z, int t) {
                    return denoiser::forward(state.params, diffusion::LatentSeq{z, t});
                };
                std::vector<std::vector<int>> seqs;
                double gen_ms = 0.0;
                for (int s = 0; s < cfg.sweep.sample_seeds; ++s) {
                    Rng srng = Rng(cell_seed).derive(0x700 + static_cast<uint64_t>(s));
                    Mat z;
                    gen_ms += timed_ms(cfg.timing, 1, [&] {
                        Rng local = srng;
                        z = sampler::sample(fn, cfg.sweep.seq_len, c.model.d_model, scfg, sched,
                                            local);
                    });
                    seqs.push_back(denoiser::round_to_tokens(z, state.params.embed));
                }
                gen_ms /= cfg.sweep.sample_seeds;

                double overlap = 0.0;
                int pairs = 0;
                for (size_t a = 0; a < seqs.size(); ++a) {
                    for (size_t b = a + 1; b < seqs.size(); ++b) {
                        std::map<int, int> ca;
                        for (int id : seqs[a]) ca[id]++;
                        int inter = 0;
                        for (int id : seqs[b]) {
                            auto it = ca.find(id);
                            if (it != ca.end() && it->second > 0) {
                                --it->second;
                                ++inter;
                            }
                        }
                        overlap += static_cast<double>(inter) / cfg.sweep.seq_len;
                        ++pairs;
                    }
                }
                if (pairs > 0) overlap /= pairs;

                csv << kind_name << ',' << steps << ',' << fmt_g17(lam) << ','
                    << fmt_g17(res.last.loss_total) << ',' << fmt_g17(res.last.loss_sas) << ','
                    << fmt_g17(std::abs(mean)) << ',' << fmt_g17(std::abs(var - 1.0)) << ','
                    << fmt_g17(gen_ms) << ',' << fmt_g17(overlap) << '\n';
                ++cell;
            }
        }
    }
}

}  // namespace drdiff::harness
