#pragma once

// Self-contained naive reference implementations used as oracles.
// Deliberately independent of the library kernels: plain loops over
// std::vector<double>, no shared helpers with the code under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace oracle {

using std::size_t;
using mat = std::vector<double>;  // row-major, caller tracks dims

// Naive triple-loop matmul: c(m x n) = a(m x k) * b(k x n).
inline mat matmul(const mat& a, const mat& b, size_t m, size_t k, size_t n) {
    mat c(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> e(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(logits[i] - mx);
        sum += e[i];
    }
    for (double& v : e) v /= sum;
    return e;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& gain,
                                      const std::vector<double>& bias, double eps = 1e-5) {
    const size_t n = x.size();
    double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * gain[i] + bias[i];
    return out;
}

// Single-head scaled dot-product attention.
// q: (nq x d), k: (nk x d), v: (nk x dv), mask: 0/-inf (nq x nk) or empty.
inline mat attention(const mat& q, const mat& k, const mat& v, const mat& mask, size_t nq, size_t nk,
                     size_t d, size_t dv) {
    mat out(nq * dv, 0.0);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    for (size_t i = 0; i < nq; ++i) {
        std::vector<double> logits(nk);
        for (size_t j = 0; j < nk; ++j) {
            double s = 0.0;
            for (size_t t = 0; t < d; ++t) s += q[i * d + t] * k[j * d + t];
            logits[j] = s * inv + (mask.empty() ? 0.0 : mask[i * nk + j]);
        }
        const auto w = softmax(logits);
        for (size_t j = 0; j < nk; ++j)
            for (size_t t = 0; t < dv; ++t) out[i * dv + t] += w[j] * v[j * dv + t];
    }
    return out;
}

inline double mean(const std::vector<double>& xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

inline double variance(const std::vector<double>& xs) {
    const double m = mean(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return acc / static_cast<double>(xs.size());
}

inline double covariance(const std::vector<double>& xs, const std::vector<double>& ys) {
    const double mx = mean(xs), my = mean(ys);
    double acc = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) acc += (xs[i] - mx) * (ys[i] - my);
    return acc / static_cast<double>(xs.size());
}

// Spearman rank correlation; assumes no ties among the small inputs it sees.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    auto ranks = [n](const std::vector<double>& v) {
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        for (size_t pos = 0; pos < n; ++pos) r[idx[pos]] = static_cast<double>(pos + 1);
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    double d2 = 0.0;
    for (size_t i = 0; i < n; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    const double dn = static_cast<double>(n);
    return 1.0 - 6.0 * d2 / (dn * (dn * dn - 1.0));
}

// Kolmogorov-Smirnov statistic of samples against U[lo, hi].
inline double ks_uniform(std::vector<double> xs, double lo, double hi) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double cdf = (xs[i] - lo) / (hi - lo);
        d = std::max(d, std::fabs(cdf - static_cast<double>(i) / n));
        d = std::max(d, std::fabs(static_cast<double>(i + 1) / n - cdf));
    }
    return d;
}

// Least-squares slope of y against x.
inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double mx = mean(x), my = mean(y);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (y[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    return num / den;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(a[i] - b[i]));
    return d;
}

}  // namespace oracle
