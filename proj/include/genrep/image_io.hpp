// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "genrep/common.hpp"

namespace genrep {

// Binary PPM (P6). Values are clamped to [0,1] before 8-bit quantization.
void write_ppm(const std::string& path, const std::vector<float>& image, int size);

// Grid sheet of equally sized images, row-major.
void write_ppm_grid(const std::string& path, const std::vector<std::vector<float>>& images,
                    int size, int columns);

} // namespace genrep
