// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/corpus.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace drdiff::harness {

namespace {
std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("corpus: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        lines.push_back(line);
    }
    return lines;
}
}  // namespace

Corpus ingest(const std::string& path, const std::string& vocab_path) {
    Corpus c;
    if (!vocab_path.empty()) {
        for (const auto& tok : read_lines(vocab_path)) {
            if (tok.empty()) continue;
            c.token_to_id.emplace(tok, c.vocab_size());
            c.vocab.push_back(tok);
        }
        if (c.vocab.empty()) throw std::runtime_error("corpus: empty vocab file " + vocab_path);
    }

    const bool pretokenized = !vocab_path.empty();
    for (const auto& line : read_lines(path)) {
        std::istringstream is(line);
        std::vector<int> seq;
        std::string tok;
        while (is >> tok) {
            if (pretokenized) {
                int id = 0;
                try {
                    size_t pos = 0;
                    id = std::stoi(tok, &pos);
                    if (pos != tok.size()) throw std::invalid_argument("");
                } catch (...) {
                    throw std::runtime_error("corpus: non-integer token '" + tok +
                                             "' in pre-tokenized input");
                }
                if (id < 0 || id >= c.vocab_size())
                    throw std::runtime_error("corpus: token id " + std::to_string(id) +
                                             " outside vocab of size " +
                                             std::to_string(c.vocab_size()));
                seq.push_back(id);
            } else {
                auto [it, inserted] = c.token_to_id.emplace(tok, c.vocab_size());
                if (inserted) c.vocab.push_back(tok);
                seq.push_back(it->second);
            }
        }
        if (!seq.empty()) c.sequences.push_back(std::move(seq));
    }
    if (c.sequences.empty()) throw std::runtime_error("corpus: no sequences in " + path);
    return c;
}

std::string detokenize(const Corpus& corpus, const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= corpus.vocab_size())
            throw std::runtime_error("detokenize: id outside vocab");
        if (i) out += ' ';
        out += corpus.vocab[ids[i]];
    }
    return out;
}

}  // namespace drdiff::harness
