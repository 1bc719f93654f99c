// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace drdiff::harness {

namespace {
std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}
}  // namespace

void KvStore::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config: bad section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key at line " + std::to_string(lineno));
        kv_[section.empty() ? key : section + "." + key] = val;
    }
}

void KvStore::set(const std::string& dotted_key, const std::string& value) {
    if (dotted_key.empty()) throw ConfigError("config: empty override key");
    kv_[dotted_key] = value;
}

std::string KvStore::get_str(const std::string& key, const std::string& dflt) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
}

int KvStore::get_int(const std::string& key, int dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
        size_t pos = 0;
        const int v = std::stoi(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError("config: expected integer for " + key + ", got '" + it->second + "'");
    }
}

long long KvStore::get_ll(const std::string& key, long long dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
        size_t pos = 0;
        const long long v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError("config: expected integer for " + key + ", got '" + it->second + "'");
    }
}

double KvStore::get_double(const std::string& key, double dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError("config: expected number for " + key + ", got '" + it->second + "'");
    }
}

bool KvStore::get_bool(const std::string& key, bool dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config: expected boolean for " + key + ", got '" + v + "'");
}

std::vector<int> KvStore::get_int_list(const std::string& key, const std::vector<int>& dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    std::vector<int> out;
    for (const auto& tok : split_list(it->second)) {
        try {
            out.push_back(std::stoi(tok));
        } catch (...) {
            throw ConfigError("config: expected integer list for " + key);
        }
    }
    if (out.empty()) throw ConfigError("config: empty list for " + key);
    return out;
}

std::vector<double> KvStore::get_double_list(const std::string& key,
                                             const std::vector<double>& dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    std::vector<double> out;
    for (const auto& tok : split_list(it->second)) {
        try {
            out.push_back(std::stod(tok));
        } catch (...) {
            throw ConfigError("config: expected number list for " + key);
        }
    }
    if (out.empty()) throw ConfigError("config: empty list for " + key);
    return out;
}

std::vector<std::string> KvStore::get_str_list(const std::string& key,
                                               const std::vector<std::string>& dflt) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    auto out = split_list(it->second);
    if (out.empty()) throw ConfigError("config: empty list for " + key);
    return out;
}

denoiser::AnchorSpec RunConfig::anchor_spec(int seq_len) const {
    denoiser::AnchorSpec spec;
    spec.timesteps = train.anchor_timesteps;
    if (spec.timesteps.empty()) {
        const int T = schedule_steps;
        spec.timesteps = {T / 4, T / 2, 3 * T / 4};
    }
    spec.lambdas = train.lambda_sas;
    if (spec.lambdas.size() == 1)
        spec.lambdas.assign(spec.timesteps.size(), spec.lambdas.front());
    spec.segment_count = std::max(1, seq_len / std::max(1, train.segment_div));
    return spec;
}

void RunConfig::validate() const {
    try {
        model.validate();
        if (schedule_steps < 2) throw ConfigError("config: schedule.steps must be >= 2");
        if (train.steps < 0 || train.batch < 1 || train.seq_len < 1)
            throw ConfigError("config: bad train section");
        if (train.seq_len > 0 && train.lambda_sas.empty())
            throw ConfigError("config: train.lambda_sas must not be empty");
        const auto spec = anchor_spec(train.seq_len);
        if (spec.lambdas.size() != spec.timesteps.size())
            throw ConfigError("config: lambda_sas list must match anchor timesteps");
        for (int t : spec.timesteps)
            if (t <= 0 || t >= schedule_steps)
                throw ConfigError("config: anchor timestep outside (0, T)");
        for (double l : spec.lambdas)
            if (l < 0.0) throw ConfigError("config: lambda_sas must be >= 0");
        if (sample.steps < 1 || (sample.order != 1 && sample.order != 2) || sample.count < 1 ||
            sample.seq_len < 1)
            throw ConfigError("config: bad sample section");
        if (sample.steps > schedule_steps)
            throw ConfigError("config: sample.steps cannot exceed schedule.steps");
        if (bench.lengths.size() < 2 || bench.reps < 1 || bench.d_model < 2 || bench.heads < 1 ||
            bench.d_model % bench.heads != 0)
            throw ConfigError("config: bad bench section");
        for (int n : bench.lengths)
            if (n < 1) throw ConfigError("config: bench lengths must be positive");
        if (ablate.seq_len < 1 || ablate.train_steps < 1 || ablate.steps_list.empty() ||
            ablate.windows.empty())
            throw ConfigError("config: bad ablate section");
        if (sweep.kinds.empty() || sweep.steps_list.empty() || sweep.lambda_sas_list.empty() ||
            sweep.train_steps < 1 || sweep.sample_seeds < 1)
            throw ConfigError("config: bad sweep section");
        if (mask_n < 1) throw ConfigError("config: mask.n must be >= 1");
        if (mask_layer < 0 || mask_layer >= model.hsa.layers_L)
            throw ConfigError("config: mask.layer outside [0, layers_L)");
        for (const auto& k : sweep.kinds) diffusion::schedule_kind_from_string(k);
        for (int s : sweep.steps_list)
            if (s < 2) throw ConfigError("config: sweep steps must be >= 2");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

RunConfig make_run_config(const KvStore& kv) {
    RunConfig c;
    c.seed = static_cast<uint64_t>(kv.get_ll("run.seed", 6));
    c.out_dir = kv.get_str("run.out_dir", "out");
    c.timing = kv.get_bool("run.timing", true);

    try {
        c.schedule_kind = diffusion::schedule_kind_from_string(
            kv.get_str("schedule.kind", "sqrt"));
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    c.schedule_steps = kv.get_int("schedule.steps", 2048);

    c.model.vocab = kv.get_int("model.vocab", 256);
    c.model.d_model = kv.get_int("model.d_model", 32);
    c.model.heads = kv.get_int("model.heads", 2);
    c.model.layers = kv.get_int("model.layers", 2);
    c.model.d_ff = kv.get_int("model.d_ff", 64);
    c.model.experts = kv.get_int("model.experts", 4);
    c.model.top_k = kv.get_int("model.top_k", 2);

    hsa::HSAConfig& h = c.model.hsa;
    h.n1 = kv.get_int("hsa.n1", 512);
    h.n2 = kv.get_int("hsa.n2", 4096);
    h.n3 = kv.get_int("hsa.n3", 8192);
    h.w4k = kv.get_int("hsa.w4k", 256);
    h.w8k = kv.get_int("hsa.w8k", 512);
    h.stride_s = kv.get_int("hsa.stride_s", 4);
    h.w16k = kv.get_int("hsa.w16k", 1024);
    h.s_meta = kv.get_int("hsa.s_meta", 8);
    h.rho = kv.get_double("hsa.rho", 0.05);
    h.anchor_cap = kv.get_int("hsa.anchor_cap", 512);
    h.scale_c = kv.get_int("hsa.scale_c", 4);
    h.layers_L = std::max(kv.get_int("hsa.layers_L", c.model.layers), c.model.layers);

    c.mask_n = kv.get_int("mask.n", 1024);
    c.mask_layer = kv.get_int("mask.layer", 0);

    c.train.steps = kv.get_int("train.steps", 500);
    c.train.batch = kv.get_int("train.batch", 1);
    c.train.seq_len = kv.get_int("train.n", 64);
    c.train.log_every = kv.get_int("train.log_every", 1);
    c.train.lr = kv.get_double("train.lr", 1e-4);
    c.train.warmup_steps = kv.get_int("train.warmup", 5000);
    c.train.weight_decay = kv.get_double("train.weight_decay", 0.01);
    c.train.grad_clip = kv.get_double("train.grad_clip", 1.0);
    c.train.lambda_aux = kv.get_double("train.lambda_aux", 0.01);
    c.train.lambda_sas = kv.get_double_list("train.lambda_sas", {0.5});
    c.train.anchor_timesteps = kv.get_int_list("train.anchor_timesteps", {});
    c.train.segment_div = kv.get_int("train.segment_div", 8);
    c.train.corpus_path = kv.get_str("train.corpus", "");
    c.train.vocab_path = kv.get_str("train.vocab_file", "");
    c.train.checkpoint_in = kv.get_str("train.checkpoint_in", "");

    c.sample.steps = kv.get_int("sample.steps", 50);
    c.sample.order = kv.get_int("sample.order", 2);
    try {
        c.sample.grid = sampler::grid_kind_from_string(kv.get_str("sample.grid", "uniform_t"));
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    c.sample.count = kv.get_int("sample.count", 4);
    c.sample.seq_len = kv.get_int("sample.n", 64);
    c.sample.checkpoint = kv.get_str("sample.checkpoint", "");
    c.sample.guidance_eta = kv.get_double("sample.guidance_eta", 0.0);

    c.bench.lengths = kv.get_int_list("bench.lengths", c.bench.lengths);
    c.bench.d_model = kv.get_int("bench.d_model", 64);
    c.bench.heads = kv.get_int("bench.heads", 4);
    c.bench.reps = kv.get_int("bench.reps", 5);

    c.ablate.seq_len = kv.get_int("ablate.n", 8192);
    c.ablate.steps_list = kv.get_int_list("ablate.steps_list", c.ablate.steps_list);
    c.ablate.windows = kv.get_int_list("ablate.windows", c.ablate.windows);
    c.ablate.train_steps = kv.get_int("ablate.train_steps", 40);
    c.ablate.train_seq_len = kv.get_int("ablate.train_n", 64);

    c.sweep.kinds = kv.get_str_list("sweep.kinds", c.sweep.kinds);
    c.sweep.steps_list = kv.get_int_list("sweep.steps_list", c.sweep.steps_list);
    c.sweep.lambda_sas_list = kv.get_double_list("sweep.lambda_sas_list", c.sweep.lambda_sas_list);
    c.sweep.train_steps = kv.get_int("sweep.train_steps", 30);
    c.sweep.sample_seeds = kv.get_int("sweep.sample_seeds", 5);
    c.sweep.seq_len = kv.get_int("sweep.n", 32);

    c.validate();
    return c;
}

}  // namespace drdiff::harness
