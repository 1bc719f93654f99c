// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "drdiff/config.hpp"
#include "drdiff/corpus.hpp"

namespace drdiff::harness {

/// Subcommand entry points. Each writes its CSV/dump outputs under out_dir
/// (created if missing) and throws ConfigError for bad configuration or
/// std::runtime_error for runtime failures.
void cmd_build_mask(const RunConfig& cfg, const std::string& out_dir);
void cmd_train(const RunConfig& cfg, const std::string& out_dir);
void cmd_sample(const RunConfig& cfg, const std::string& out_dir);
void cmd_bench(const RunConfig& cfg, const std::string& out_dir);
void cmd_ablate(const RunConfig& cfg, const std::string& out_dir);
void cmd_sweep(const RunConfig& cfg, const std::string& out_dir);

/// Deterministic stand-in corpus used when no corpus path is configured.
Corpus make_synthetic_corpus(int vocab, int n_sequences, int seq_len, uint64_t seed);

/// Repeatable %.17g formatting so reruns produce byte-identical CSVs.
std::string fmt_g17(double x);

}  // namespace drdiff::harness
