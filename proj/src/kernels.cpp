// SPDX-License-Identifier: Apache-2.0
#include "genrep/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace genrep::kern {

namespace {
std::atomic<bool> g_force_serial{false};
// Below this many flops the OpenMP fork/join overhead dominates.
constexpr long kParallelCutoff = 1 << 16;

// Rows [r0,r1) of the product. Per-element accumulation is ascending in k
// for every variant, which is what makes the parallel split bit-exact.
void matmul_rows(const float* a, const float* b, float* y, int m, int k, int n,
                 bool ta, bool tb, bool acc, int r0, int r1) {
    if (!acc) {
        std::memset(y + static_cast<size_t>(r0) * n, 0,
                    static_cast<size_t>(r1 - r0) * n * sizeof(float));
    }
    if (!ta && !tb) {
        for (int i = r0; i < r1; ++i) {
            const float* ai = a + static_cast<size_t>(i) * k;
            float* yi = y + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const float av = ai[p];
                const float* bp = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) {
                    yi[j] += av * bp[j];
                }
            }
        }
    } else if (!ta && tb) {
        for (int i = r0; i < r1; ++i) {
            const float* ai = a + static_cast<size_t>(i) * k;
            float* yi = y + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const float* bj = b + static_cast<size_t>(j) * k;
                float s = 0.0f;
                for (int p = 0; p < k; ++p) {
                    s += ai[p] * bj[p];
                }
                yi[j] += s;
            }
        }
    } else if (ta && !tb) {
        for (int i = r0; i < r1; ++i) {
            float* yi = y + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const float av = a[static_cast<size_t>(p) * m + i];
                const float* bp = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) {
                    yi[j] += av * bp[j];
                }
            }
        }
    } else {
        for (int i = r0; i < r1; ++i) {
            float* yi = y + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                float s = 0.0f;
                for (int p = 0; p < k; ++p) {
                    s += a[static_cast<size_t>(p) * m + i] * b[static_cast<size_t>(j) * k + p];
                }
                yi[j] += s;
            }
        }
    }
}

} // namespace

void set_force_serial(bool on) { g_force_serial.store(on); }
bool force_serial() { return g_force_serial.load(); }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool par_for_enabled(long work) {
#ifdef _OPENMP
    return !force_serial() && work >= kParallelCutoff && max_threads() > 1;
#else
    (void)work;
    return false;
#endif
}

void matmul_serial(const float* a, const float* b, float* y, int m, int k, int n,
                   bool ta, bool tb, bool acc) {
    matmul_rows(a, b, y, m, k, n, ta, tb, acc, 0, m);
}

void matmul(const float* a, const float* b, float* y, int m, int k, int n,
            bool ta, bool tb, bool acc) {
    const long work = 2L * m * k * n;
    if (par_for_enabled(work) && m > 1) {
#pragma omp parallel
        {
#ifdef _OPENMP
            int nt = omp_get_num_threads();
            int tid = omp_get_thread_num();
#else
            int nt = 1, tid = 0;
#endif
            int chunk = (m + nt - 1) / nt;
            int r0 = std::min(m, tid * chunk);
            int r1 = std::min(m, r0 + chunk);
            if (r0 < r1) {
                matmul_rows(a, b, y, m, k, n, ta, tb, acc, r0, r1);
            }
        }
    } else {
        matmul_serial(a, b, y, m, k, n, ta, tb, acc);
    }
}

} // namespace genrep::kern
