// SPDX-License-Identifier: Apache-2.0
//
// Times the serial reference kernels against the OpenMP dispatch path.
// The two paths are bit-identical; this target exists to show the speedup
// and to catch regressions in the parallel split.

#include <chrono>
#include <cstdio>
#include <vector>

#include "genrep/kernels.hpp"
#include "genrep/rng.hpp"
#include "genrep/tensor.hpp"

using namespace genrep;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
    fn(); // warm
    const auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) {
        fn();
    }
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void bench_matmul(int m, int k, int n, int reps) {
    Rng rng(7);
    std::vector<float> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n),
        y(static_cast<size_t>(m) * n);
    for (float& v : a) {
        v = static_cast<float>(rng.normal());
    }
    for (float& v : b) {
        v = static_cast<float>(rng.normal());
    }
    const double serial = time_ms(reps, [&] {
        kern::matmul_serial(a.data(), b.data(), y.data(), m, k, n, false, false, false);
    });
    const double parallel = time_ms(reps, [&] {
        kern::matmul(a.data(), b.data(), y.data(), m, k, n, false, false, false);
    });
    const double gflops = 2.0 * m * k * n / 1e6;
    std::printf("matmul %4dx%4dx%4d  serial %8.3f ms (%6.2f GF/s)  omp %8.3f ms (%6.2f GF/s)  x%.2f\n",
                m, k, n, serial, gflops / serial, parallel, gflops / parallel,
                serial / parallel);
}

void bench_attention(int B, int L, int D, int heads, int reps) {
    Rng rng(9);
    auto make = [&](std::vector<int> shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (float& v : t.vec()) {
            v = static_cast<float>(rng.normal());
        }
        return t;
    };
    Tensor q = make({B, L, D}), k = make({B, L, D}), v = make({B, L, D});
    kern::set_force_serial(true);
    const double serial = time_ms(reps, [&] { attention(q, k, v, heads); });
    kern::set_force_serial(false);
    const double parallel = time_ms(reps, [&] { attention(q, k, v, heads); });
    std::printf("attention B=%d L=%4d D=%3d h=%d  serial %8.3f ms  omp %8.3f ms  x%.2f\n", B, L,
                D, heads, serial, parallel, serial / parallel);
}

} // namespace

int main() {
    std::printf("threads: %d\n", kern::max_threads());
    bench_matmul(64, 64, 64, 200);
    bench_matmul(256, 128, 128, 100);
    bench_matmul(1024, 192, 96, 50);
    bench_matmul(272, 48, 192, 100);
    bench_attention(16, 65, 64, 4, 50);
    bench_attention(16, 32, 128, 4, 50);
    return 0;
}
