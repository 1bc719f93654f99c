// Copyright 2026 The drdiff Authors
// SPDX-License-Identifier: Apache-2.0
#include "drdiff/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace drdiff {

bool Mat::all_finite() const {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Mat Mat::filled(int r, int c, double x) {
    Mat m(r, c);
    std::fill(m.v.begin(), m.v.end(), x);
    return m;
}

Mat operator+(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("Mat shape mismatch in operator+");
    Mat c(a.rows, a.cols);
    for (size_t i = 0; i < a.v.size(); ++i) c.v[i] = a.v[i] + b.v[i];
    return c;
}

Mat operator-(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("Mat shape mismatch in operator-");
    Mat c(a.rows, a.cols);
    for (size_t i = 0; i < a.v.size(); ++i) c.v[i] = a.v[i] - b.v[i];
    return c;
}

Mat operator*(const Mat& a, double s) {
    Mat c(a.rows, a.cols);
    for (size_t i = 0; i < a.v.size(); ++i) c.v[i] = a.v[i] * s;
    return c;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw std::invalid_argument("Mat shape mismatch in matmul");
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.v.data() + static_cast<size_t>(k) * b.cols;
            double* crow = c.v.data() + static_cast<size_t>(i) * c.cols;
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Mat transpose(const Mat& a) {
    Mat t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double frob_sq(const Mat& a) {
    double s = 0.0;
    for (double x : a.v) s += x * x;
    return s;
}

std::vector<double> softmax_row(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    softmax_row_inplace(out);
    return out;
}

void softmax_row_inplace(std::span<double> v) {
    if (v.empty()) throw std::invalid_argument("empty attention row");
    double mx = kNegInf;
    for (double x : v) mx = std::max(mx, x);
    if (mx == kNegInf) throw std::invalid_argument("empty attention row");
    double sum = 0.0;
    for (double& x : v) {
        x = (x == kNegInf) ? 0.0 : std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

namespace {
inline uint64_t splitmix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace

uint64_t Rng::next_u64() { return splitmix64(seed_ + 0x9e3779b97f4a7c15ULL * counter_++); }

double Rng::uniform() {
    // 53-bit mantissa, shifted into (0, 1] so log() below is always defined.
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
}

double Rng::normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::derive(uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream))); }

Mat gaussian(Rng& rng, int rows, int cols) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("gaussian: non-positive shape");
    Mat m(rows, cols);
    for (double& x : m.v) x = rng.normal();
    return m;
}

double grad_check(const std::function<double(const Mat&)>& f, const Mat& analytic_grad,
                  const Mat& x, double h) {
    if (!x.same_shape(analytic_grad))
        throw std::invalid_argument("grad_check: gradient shape mismatch");
    if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    Mat probe = x;
    double worst = 0.0;
    for (size_t i = 0; i < probe.v.size(); ++i) {
        const double orig = probe.v[i];
        probe.v[i] = orig + h;
        const double fp = f(probe);
        probe.v[i] = orig - h;
        const double fm = f(probe);
        probe.v[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite function evaluation");
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(fd - analytic_grad.v[i]) / (std::abs(analytic_grad.v[i]) + 1e-8);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace drdiff
