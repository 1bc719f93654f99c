// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace drdiff {

/// Dense row-major matrix of doubles. The single tensor type used across the
/// library for activations, parameters and latents.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    double& operator()(int r, int c) { return at(r, c); }
    double operator()(int r, int c) const { return at(r, c); }

    std::span<double> row(int r) { return {v.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {v.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t size() const { return v.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    bool all_finite() const;

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat filled(int r, int c, double x);
};

Mat operator+(const Mat& a, const Mat& b);
Mat operator-(const Mat& a, const Mat& b);
Mat operator*(const Mat& a, double s);
// C = A (r x k) * B (k x c)
Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
double dot(std::span<const double> a, std::span<const double> b);
double frob_sq(const Mat& a);

/// Sentinel for masked-out attention scores. Kept as a true IEEE -inf so that
/// softmax_row can map it to an exact zero rather than a denormal.
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Numerically stable softmax over one row. -inf entries yield exactly 0.
/// Throws std::invalid_argument when the row is empty or all entries are -inf.
std::vector<double> softmax_row(std::span<const double> v);
void softmax_row_inplace(std::span<double> v);

/// Counter-based deterministic generator.
///
/// Each output is splitmix64(seed + 0x9e3779b97f4a7c15 * counter), with the
/// counter incremented per draw. Identical seed + call sequence reproduces the
/// stream bit-exactly, and derive() yields statistically disjoint streams for
/// parallel shards. Normals use Box-Muller, consuming exactly two uniforms per
/// value (no caching), which keeps the call sequence trivially replayable.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed) {}
    Rng(uint64_t seed, uint64_t counter) : seed_(seed), counter_(counter) {}

    uint64_t next_u64();
    /// Uniform in (0, 1].
    double uniform();
    /// Standard normal via Box-Muller.
    double normal();

    /// Independent stream for a parallel shard; does not advance this stream.
    Rng derive(uint64_t stream) const;

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

  private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

/// rows x cols matrix of i.i.d. standard normals drawn from rng.
/// Throws std::invalid_argument for non-positive shapes.
Mat gaussian(Rng& rng, int rows, int cols);

/// Central-finite-difference gradient checker.
/// Returns max over entries of |fd - analytic| / (|analytic| + 1e-8).
/// Throws std::runtime_error when f evaluates to a non-finite value.
double grad_check(const std::function<double(const Mat&)>& f, const Mat& analytic_grad,
                  const Mat& x, double h);

}  // namespace drdiff
