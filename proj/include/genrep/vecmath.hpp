// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

namespace genrep {

inline double dot(const float* a, const float* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        s += static_cast<double>(a[i]) * b[i];
    }
    return s;
}

inline double l2_sq(const float* a, const float* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s;
}

inline double cosine_sim(const float* a, const float* b, size_t n) {
    const double na = std::sqrt(dot(a, a, n));
    const double nb = std::sqrt(dot(b, b, n));
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot(a, b, n) / (na * nb);
}

} // namespace genrep
