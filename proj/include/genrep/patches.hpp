// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "genrep/common.hpp"

namespace genrep {

// Images are channel-major float vectors: [3][H][W], values in [0,1].
// Patches are row-major over the grid; within a patch the layout is
// [c][py][px], giving vectors of length 3*p*p.

inline int patch_grid(int image_size, int patch) {
    if (patch <= 0 || image_size % patch != 0) {
        throw ConfigError("image size must be divisible by patch size");
    }
    return image_size / patch;
}

inline std::vector<float> patchify(const std::vector<float>& image, int image_size, int patch) {
    if (static_cast<int>(image.size()) != 3 * image_size * image_size) {
        throw DimError("patchify: image size mismatch");
    }
    const int g = patch_grid(image_size, patch);
    const int pd = 3 * patch * patch;
    std::vector<float> out(static_cast<size_t>(g) * g * pd);
    for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            float* dst = out.data() + (static_cast<size_t>(gy) * g + gx) * pd;
            for (int c = 0; c < 3; ++c) {
                for (int py = 0; py < patch; ++py) {
                    const int y = gy * patch + py;
                    const float* src =
                        image.data() + (static_cast<size_t>(c) * image_size + y) * image_size +
                        gx * patch;
                    for (int px = 0; px < patch; ++px) {
                        dst[(c * patch + py) * patch + px] = src[px];
                    }
                }
            }
        }
    }
    return out;
}

inline std::vector<float> depatchify(const std::vector<float>& tokens, int image_size, int patch) {
    const int g = patch_grid(image_size, patch);
    const int pd = 3 * patch * patch;
    if (static_cast<int>(tokens.size()) != g * g * pd) {
        throw DimError("depatchify: token count mismatch");
    }
    std::vector<float> image(static_cast<size_t>(3) * image_size * image_size);
    for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            const float* src = tokens.data() + (static_cast<size_t>(gy) * g + gx) * pd;
            for (int c = 0; c < 3; ++c) {
                for (int py = 0; py < patch; ++py) {
                    const int y = gy * patch + py;
                    float* dst =
                        image.data() + (static_cast<size_t>(c) * image_size + y) * image_size +
                        gx * patch;
                    for (int px = 0; px < patch; ++px) {
                        dst[px] = src[(c * patch + py) * patch + px];
                    }
                }
            }
        }
    }
    return image;
}

} // namespace genrep
