// SPDX-License-Identifier: Apache-2.0
#include "genrep/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace genrep {

namespace {

unsigned char to_byte(float v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

} // namespace

void write_ppm(const std::string& path, const std::vector<float>& image, int size) {
    write_ppm_grid(path, {image}, size, 1);
}

void write_ppm_grid(const std::string& path, const std::vector<std::vector<float>>& images,
                    int size, int columns) {
    if (images.empty() || columns < 1) {
        throw ContractError("write_ppm_grid: nothing to write");
    }
    const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
    const int W = columns * size;
    const int H = rows * size;
    std::vector<unsigned char> buf(static_cast<size_t>(3) * W * H, 32);
    for (int i = 0; i < static_cast<int>(images.size()); ++i) {
        const std::vector<float>& img = images[static_cast<size_t>(i)];
        if (static_cast<int>(img.size()) != 3 * size * size) {
            throw DimError("write_ppm_grid: image size mismatch");
        }
        const int gx = (i % columns) * size;
        const int gy = (i / columns) * size;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                for (int c = 0; c < 3; ++c) {
                    buf[(static_cast<size_t>(gy + y) * W + gx + x) * 3 + c] =
                        to_byte(img[(static_cast<size_t>(c) * size + y) * size + x]);
                }
            }
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot write image: " + path);
    }
    f << "P6\n" << W << ' ' << H << "\n255\n";
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

} // namespace genrep
