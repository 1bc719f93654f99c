// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "drdiff/denoiser.hpp"
#include "drdiff/diffusion.hpp"
#include "drdiff/sampler.hpp"

namespace drdiff::harness {

/// Raised for any invalid or inconsistent configuration; the CLI maps it to
/// exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key-value store with [section] scoping, "key = value" lines and
/// '#' comments. --set section.key=value overrides land here too.
class KvStore {
  public:
    void load_file(const std::string& path);
    void set(const std::string& dotted_key, const std::string& value);

    std::string get_str(const std::string& key, const std::string& dflt) const;
    int get_int(const std::string& key, int dflt) const;
    long long get_ll(const std::string& key, long long dflt) const;
    double get_double(const std::string& key, double dflt) const;
    bool get_bool(const std::string& key, bool dflt) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& dflt) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& dflt) const;
    std::vector<std::string> get_str_list(const std::string& key,
                                          const std::vector<std::string>& dflt) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

  private:
    std::map<std::string, std::string> kv_;
};

struct TrainSection {
    int steps = 500;
    int batch = 1;
    int seq_len = 64;
    int log_every = 1;
    double lr = 1e-4;
    int warmup_steps = 5000;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double lambda_aux = 0.01;
    std::vector<double> lambda_sas = {0.5, 0.5, 0.5};
    std::vector<int> anchor_timesteps;  // empty: derived as {T/4, T/2, 3T/4}
    int segment_div = 8;                // segment_count = max(1, n / segment_div)
    std::string corpus_path;
    std::string vocab_path;
    std::string checkpoint_in;
};

struct SampleSection {
    int steps = 50;
    int order = 2;
    sampler::GridKind grid = sampler::GridKind::UniformT;
    int count = 4;
    int seq_len = 64;
    std::string checkpoint;
    double guidance_eta = 0.0;
};

struct BenchSection {
    std::vector<int> lengths = {256, 512, 1024, 2048, 4096, 9216, 12288, 16384, 24576};
    int d_model = 64;
    int heads = 4;
    int reps = 5;
};

struct AblateSection {
    int seq_len = 8192;
    std::vector<int> steps_list = {1024, 2048, 4096};
    std::vector<int> windows = {256, 512, 1024};
    int train_steps = 40;
    int train_seq_len = 64;
};

struct SweepSection {
    std::vector<std::string> kinds = {"linear", "exponential", "cosine", "sqrt"};
    std::vector<int> steps_list = {512, 1024, 2048, 4096, 8192};
    std::vector<double> lambda_sas_list = {0.0, 0.1, 0.3, 0.5, 0.7, 1.0};
    int train_steps = 30;
    int sample_seeds = 5;
    int seq_len = 32;
};

/// Every module default, overridable, validated before any run starts.
struct RunConfig {
    uint64_t seed = 6;
    std::string out_dir = "out";
    bool timing = true;  // false zeroes wall-time columns for byte-stable CSVs

    diffusion::ScheduleKind schedule_kind = diffusion::ScheduleKind::Sqrt;
    int schedule_steps = 2048;

    denoiser::DenoiserConfig model;

    int mask_n = 1024;    // build-mask target length
    int mask_layer = 0;   // build-mask layer index

    TrainSection train;
    SampleSection sample;
    BenchSection bench;
    AblateSection ablate;
    SweepSection sweep;

    /// Anchor spec resolved against the schedule length.
    denoiser::AnchorSpec anchor_spec(int seq_len) const;

    void validate() const;  // throws ConfigError
};

/// Builds a RunConfig from a parsed store; throws ConfigError on bad values.
RunConfig make_run_config(const KvStore& kv);

}  // namespace drdiff::harness
