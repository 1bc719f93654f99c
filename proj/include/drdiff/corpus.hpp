// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace drdiff::harness {

struct Corpus {
    std::vector<std::string> vocab;  // id -> token
    std::unordered_map<std::string, int> token_to_id;
    std::vector<std::vector<int>> sequences;

    int vocab_size() const { return static_cast<int>(vocab.size()); }
};

/// Whitespace-tokenized lines; vocab ids assigned in first-seen order.
/// With a non-empty vocab_path, lines are pre-tokenized integer ids and the
/// sidecar file lists one token per line. Throws std::runtime_error for a
/// missing/empty file or an id outside the vocab.
Corpus ingest(const std::string& path, const std::string& vocab_path = "");

std::string detokenize(const Corpus& corpus, const std::vector<int>& ids);

}  // namespace drdiff::harness
