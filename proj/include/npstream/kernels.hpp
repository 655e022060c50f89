#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <string>

#include "npstream/error.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// ============================================================================
// Raw dense kernels on row-major buffers.
//
// The default entry points parallelise across independent output rows with
// OpenMP. Within one output element the accumulation order is fixed (k
// ascending), so results are bitwise identical to the serial reference and
// independent of the thread count. kernels::serial keeps plain-loop versions
// around: tests use them as cross-checks and kernel_bench compares the two.
// ============================================================================

namespace npstream::kernels {

using i64 = std::int64_t;

// Below this many multiply-adds the parallel region is pure overhead.
inline constexpr i64 kParGrain = 1 << 15;

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

// Honour NPSTREAM_THREADS if set; returns the resulting worker count.
inline int apply_thread_env() {
    if (const char* env = std::getenv("NPSTREAM_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) set_threads(n);
    }
    return max_threads();
}

namespace serial {

// c(m x n) = a(m x k) * b(k x n)
template <class T>
void matmul(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        for (i64 j = 0; j < n; ++j) {
            T acc = T(0);
            for (i64 kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    }
}

// c(m x n) = a(m x k) * b(n x k)^T
template <class T>
void matmul_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        for (i64 j = 0; j < n; ++j) {
            T acc = T(0);
            for (i64 kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[j * k + kk];
            c[i * n + j] = acc;
        }
    }
}

// c(k x n) = a(m x k)^T * b(m x n)
template <class T>
void matmul_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < k; ++i) {
        for (i64 j = 0; j < n; ++j) {
            T acc = T(0);
            for (i64 kk = 0; kk < m; ++kk) acc += a[kk * k + i] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    }
}

// Row-wise softmax of (logits + mask) with max subtraction. mask may be null.
// Returns the index of the first fully masked row, or -1 if none.
template <class T>
i64 softmax_rows(const T* logits, const T* mask, T* out, i64 rows, i64 cols) {
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    for (i64 i = 0; i < rows; ++i) {
        const T* lrow = logits + i * cols;
        const T* mrow = mask ? mask + i * cols : nullptr;
        T mx = kNegInf;
        for (i64 j = 0; j < cols; ++j) {
            const T v = mrow ? lrow[j] + mrow[j] : lrow[j];
            if (v > mx) mx = v;
        }
        if (mx == kNegInf) return i;
        T* orow = out + i * cols;
        T sum = T(0);
        for (i64 j = 0; j < cols; ++j) {
            const T v = mrow ? lrow[j] + mrow[j] : lrow[j];
            const T e = std::exp(v - mx);
            orow[j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (i64 j = 0; j < cols; ++j) orow[j] *= inv;
    }
    return -1;
}

// Row-wise layer norm with affine gain/bias; population variance + eps.
template <class T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* out,
                     i64 rows, i64 cols, T eps) {
    for (i64 i = 0; i < rows; ++i) {
        const T* xr = x + i * cols;
        T* orow = out + i * cols;
        T mean = T(0);
        for (i64 j = 0; j < cols; ++j) mean += xr[j];
        mean /= T(cols);
        T var = T(0);
        for (i64 j = 0; j < cols; ++j) {
            const T d = xr[j] - mean;
            var += d * d;
        }
        var /= T(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        for (i64 j = 0; j < cols; ++j)
            orow[j] = (xr[j] - mean) * inv * gain[j] + bias[j];
    }
}

}  // namespace serial

template <class T>
void matmul(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * k * n > kParGrain && m > 1)
#endif
    for (i64 i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (i64 j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (i64 kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            const T* brow = b + kk * n;
            for (i64 j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * k * n > kParGrain && m > 1)
#endif
    for (i64 i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (i64 j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (i64 kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * k * n > kParGrain && k > 1)
#endif
    for (i64 i = 0; i < k; ++i) {
        T* crow = c + i * n;
        for (i64 j = 0; j < n; ++j) {
            T acc = T(0);
            for (i64 kk = 0; kk < m; ++kk) acc += a[kk * k + i] * b[kk * n + j];
            crow[j] = acc;
        }
    }
}

template <class T>
i64 softmax_rows(const T* logits, const T* mask, T* out, i64 rows, i64 cols) {
    i64 bad = -1;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * cols > kParGrain && rows > 1)
#endif
    for (i64 i = 0; i < rows; ++i) {
        const i64 r = serial::softmax_rows(logits + i * cols, mask ? mask + i * cols : nullptr,
                                           out + i * cols, 1, cols);
        if (r >= 0) {
#ifdef _OPENMP
#pragma omp critical
#endif
            {
                if (bad < 0 || i < bad) bad = i;
            }
        }
    }
    return bad;
}

template <class T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* out,
                     i64 rows, i64 cols, T eps) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * cols > kParGrain && rows > 1)
#endif
    for (i64 i = 0; i < rows; ++i)
        serial::layer_norm_rows(x + i * cols, gain, bias, out + i * cols, 1, cols, eps);
}

}  // namespace npstream::kernels
