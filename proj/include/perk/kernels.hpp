#pragma once

// Raw buffer kernels. Every kernel comes in a serial and an OpenMP-parallel
// variant with identical arithmetic: parallel versions only split work across
// independent output elements (or fixed-size blocks with a serial combine),
// so results are bit-identical for any thread count. The serial variants are
// the reference used by tests and the kernel benchmark.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace perk::kern {

bool parallel_enabled() noexcept;
void set_parallel_enabled(bool on) noexcept;

// True when kernel-level threading should actually be used for `work` output
// elements: parallelism enabled, not already inside a parallel region, and
// enough work to amortize the fork.
inline bool use_threads(std::int64_t work) noexcept {
#ifdef _OPENMP
    return parallel_enabled() && !omp_in_parallel() && work >= 4096;
#else
    (void)work;
    return false;
#endif
}

inline constexpr std::int64_t kSumBlock = 4096;

namespace serial {

// C[M,N] = A[M,K] * B[K,N]
template <typename Real>
void matmul(std::int64_t m, std::int64_t k, std::int64_t n, const Real* a, const Real* b,
            Real* c) {
    for (std::int64_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        std::memset(ci, 0, sizeof(Real) * static_cast<std::size_t>(n));
        const Real* ai = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const Real aip = ai[p];
            const Real* bp = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
}

template <typename Real>
void transpose(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            out[j * r + i] = a[i * c + j];
        }
    }
}

template <typename Real, typename F>
void map1(std::int64_t n, const Real* a, Real* out, F f) {
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = f(a[i]);
    }
}

template <typename Real, typename F>
void map2(std::int64_t n, const Real* a, const Real* b, Real* out, F f) {
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = f(a[i], b[i]);
    }
}

// Deterministic blocked sum: per-block partials in fixed order, combined in
// block order. Identical result for serial and parallel variants.
template <typename Real>
Real sum(std::int64_t n, const Real* a) {
    const std::int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
    Real total = Real(0);
    for (std::int64_t blk = 0; blk < nblocks; ++blk) {
        const std::int64_t lo = blk * kSumBlock;
        const std::int64_t hi = std::min(n, lo + kSumBlock);
        Real part = Real(0);
        for (std::int64_t i = lo; i < hi; ++i) {
            part += a[i];
        }
        total += part;
    }
    return total;
}

template <typename Real>
void rowsum(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    for (std::int64_t i = 0; i < r; ++i) {
        Real s = Real(0);
        const Real* ai = a + i * c;
        for (std::int64_t j = 0; j < c; ++j) {
            s += ai[j];
        }
        out[i] = s;
    }
}

template <typename Real>
void colsum(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    for (std::int64_t j = 0; j < c; ++j) {
        Real s = Real(0);
        for (std::int64_t i = 0; i < r; ++i) {
            s += a[i * c + j];
        }
        out[j] = s;
    }
}

template <typename Real>
void rowmax(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    for (std::int64_t i = 0; i < r; ++i) {
        const Real* ai = a + i * c;
        Real m = ai[0];
        for (std::int64_t j = 1; j < c; ++j) {
            m = std::max(m, ai[j]);
        }
        out[i] = m;
    }
}

template <typename Real>
void broadcast_col(std::int64_t r, std::int64_t c, const Real* v, Real* out) {
    for (std::int64_t i = 0; i < r; ++i) {
        const Real x = v[i];
        Real* oi = out + i * c;
        for (std::int64_t j = 0; j < c; ++j) {
            oi[j] = x;
        }
    }
}

template <typename Real>
void broadcast_row(std::int64_t r, std::int64_t c, const Real* v, Real* out) {
    for (std::int64_t i = 0; i < r; ++i) {
        std::memcpy(out + i * c, v, sizeof(Real) * static_cast<std::size_t>(c));
    }
}

template <typename Real>
void gather_rows(std::int64_t t, std::int64_t d, const Real* table, const std::int32_t* ids,
                 Real* out) {
    for (std::int64_t i = 0; i < t; ++i) {
        std::memcpy(out + i * d, table + static_cast<std::int64_t>(ids[i]) * d,
                    sizeof(Real) * static_cast<std::size_t>(d));
    }
}

// out[V,D] += rows of src scattered by ids, accumulated in source order.
template <typename Real>
void scatter_add_rows(std::int64_t t, std::int64_t d, const Real* src, const std::int32_t* ids,
                      Real* out) {
    for (std::int64_t i = 0; i < t; ++i) {
        Real* o = out + static_cast<std::int64_t>(ids[i]) * d;
        const Real* s = src + i * d;
        for (std::int64_t j = 0; j < d; ++j) {
            o[j] += s[j];
        }
    }
}

template <typename Real>
void slice_block(std::int64_t cols, std::int64_t r0, std::int64_t r1, std::int64_t c0,
                 std::int64_t c1, const Real* a, Real* out) {
    const std::int64_t w = c1 - c0;
    for (std::int64_t i = r0; i < r1; ++i) {
        std::memcpy(out + (i - r0) * w, a + i * cols + c0,
                    sizeof(Real) * static_cast<std::size_t>(w));
    }
}

// Writes `a` ([r1-r0, c1-c0]) into an all-zero [rows, cols] buffer.
template <typename Real>
void pad_block(std::int64_t rows, std::int64_t cols, std::int64_t r0, std::int64_t r1,
               std::int64_t c0, std::int64_t c1, const Real* a, Real* out) {
    std::memset(out, 0, sizeof(Real) * static_cast<std::size_t>(rows * cols));
    const std::int64_t w = c1 - c0;
    for (std::int64_t i = r0; i < r1; ++i) {
        std::memcpy(out + i * cols + c0, a + (i - r0) * w,
                    sizeof(Real) * static_cast<std::size_t>(w));
    }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Parallel variants. Each splits only across independent outputs.

template <typename Real>
void matmul(std::int64_t m, std::int64_t k, std::int64_t n, const Real* a, const Real* b,
            Real* c) {
    if (!use_threads(m * n) || m < 2) {
        serial::matmul(m, k, n, a, b, c);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        std::memset(ci, 0, sizeof(Real) * static_cast<std::size_t>(n));
        const Real* ai = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const Real aip = ai[p];
            const Real* bp = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
#endif
}

template <typename Real>
void transpose(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    if (!use_threads(r * c)) {
        serial::transpose(r, c, a, out);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            out[j * r + i] = a[i * c + j];
        }
    }
#endif
}

template <typename Real, typename F>
void map1(std::int64_t n, const Real* a, Real* out, F f) {
    if (!use_threads(n)) {
        serial::map1(n, a, out, f);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = f(a[i]);
    }
#endif
}

template <typename Real, typename F>
void map2(std::int64_t n, const Real* a, const Real* b, Real* out, F f) {
    if (!use_threads(n)) {
        serial::map2(n, a, b, out, f);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = f(a[i], b[i]);
    }
#endif
}

template <typename Real>
Real sum(std::int64_t n, const Real* a) {
    if (!use_threads(n)) {
        return serial::sum(n, a);
    }
#ifdef _OPENMP
    const std::int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
    std::vector<Real> parts(static_cast<std::size_t>(nblocks));
#pragma omp parallel for schedule(static)
    for (std::int64_t blk = 0; blk < nblocks; ++blk) {
        const std::int64_t lo = blk * kSumBlock;
        const std::int64_t hi = std::min(n, lo + kSumBlock);
        Real part = Real(0);
        for (std::int64_t i = lo; i < hi; ++i) {
            part += a[i];
        }
        parts[static_cast<std::size_t>(blk)] = part;
    }
    Real total = Real(0);
    for (std::int64_t blk = 0; blk < nblocks; ++blk) {
        total += parts[static_cast<std::size_t>(blk)];
    }
    return total;
#else
    return serial::sum(n, a);
#endif
}

template <typename Real>
void rowsum(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    if (!use_threads(r * c) || r < 2) {
        serial::rowsum(r, c, a, out);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < r; ++i) {
        Real s = Real(0);
        const Real* ai = a + i * c;
        for (std::int64_t j = 0; j < c; ++j) {
            s += ai[j];
        }
        out[i] = s;
    }
#endif
}

template <typename Real>
void colsum(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    if (!use_threads(r * c) || c < 2) {
        serial::colsum(r, c, a, out);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < c; ++j) {
        Real s = Real(0);
        for (std::int64_t i = 0; i < r; ++i) {
            s += a[i * c + j];
        }
        out[j] = s;
    }
#endif
}

template <typename Real>
void rowmax(std::int64_t r, std::int64_t c, const Real* a, Real* out) {
    serial::rowmax(r, c, a, out);
}

template <typename Real>
void broadcast_col(std::int64_t r, std::int64_t c, const Real* v, Real* out) {
    serial::broadcast_col(r, c, v, out);
}

template <typename Real>
void broadcast_row(std::int64_t r, std::int64_t c, const Real* v, Real* out) {
    serial::broadcast_row(r, c, v, out);
}

template <typename Real>
void gather_rows(std::int64_t t, std::int64_t d, const Real* table, const std::int32_t* ids,
                 Real* out) {
    serial::gather_rows(t, d, table, ids, out);
}

// Parallel over columns: each column accumulates in source-row order, so
// duplicate ids produce the same bits as the serial version.
template <typename Real>
void scatter_add_rows(std::int64_t t, std::int64_t d, const Real* src, const std::int32_t* ids,
                      Real* out) {
    if (!use_threads(t * d) || d < 2) {
        serial::scatter_add_rows(t, d, src, ids, out);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < d; ++j) {
        for (std::int64_t i = 0; i < t; ++i) {
            out[static_cast<std::int64_t>(ids[i]) * d + j] += src[i * d + j];
        }
    }
#endif
}

template <typename Real>
void slice_block(std::int64_t cols, std::int64_t r0, std::int64_t r1, std::int64_t c0,
                 std::int64_t c1, const Real* a, Real* out) {
    serial::slice_block(cols, r0, r1, c0, c1, a, out);
}

template <typename Real>
void pad_block(std::int64_t rows, std::int64_t cols, std::int64_t r0, std::int64_t r1,
               std::int64_t c0, std::int64_t c1, const Real* a, Real* out) {
    serial::pad_block(rows, cols, r0, r1, c0, c1, a, out);
}

template <typename Real>
bool all_finite(std::int64_t n, const Real* a) noexcept {
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(a[i])) {
            return false;
        }
    }
    return true;
}

}  // namespace perk::kern
