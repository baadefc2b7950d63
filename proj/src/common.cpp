// SPDX-License-Identifier: Apache-2.0
#include "genrep/common.hpp"

#include <atomic>

namespace genrep {

namespace {
std::atomic<bool> g_check_finite{false};
}

bool check_finite_enabled() { return g_check_finite.load(std::memory_order_relaxed); }
void set_check_finite(bool on) { g_check_finite.store(on, std::memory_order_relaxed); }

} // namespace genrep
