// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace genrep::kern {

// Force the serial reference path everywhere (test/bench hook).
void set_force_serial(bool on);
bool force_serial();
int max_threads();

// y[m,n] = op(a) * op(b), op selected by the transpose flags.
// a is [m,k] (or [k,m] when ta), b is [k,n] (or [n,k] when tb).
// When acc is set the product is added into y instead of overwriting it.
//
// matmul() dispatches to an OpenMP row-parallel loop for large products.
// Every output element is accumulated by exactly one thread in ascending-k
// order, so matmul() and matmul_serial() are bit-identical for all inputs.
void matmul_serial(const float* a, const float* b, float* y, int m, int k, int n,
                   bool ta, bool tb, bool acc);
void matmul(const float* a, const float* b, float* y, int m, int k, int n,
            bool ta, bool tb, bool acc);

bool par_for_enabled(long work);

// Parallel-for over [0,n) with a serial fallback below `grain_work` flops.
// fn must write disjoint outputs per index.
template <typename Fn>
void par_for(int n, long grain_work, Fn&& fn) {
    if (par_for_enabled(grain_work)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            fn(i);
        }
    } else {
        for (int i = 0; i < n; ++i) {
            fn(i);
        }
    }
}

} // namespace genrep::kern
