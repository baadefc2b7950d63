// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "genrep/common.hpp"
#include "genrep/rng.hpp"

namespace genrep {

// Procedural fine-grained scenes: one primary shape with controlled
// attributes plus count-1 smaller copies in other quadrants.
struct SceneSpec {
    int shape_class = 0; // 0 circle, 1 square, 2 triangle, 3 cross
    int color = 0;       // 6 hues
    int count = 1;       // 1..4 instances
    int orientation = 0; // multiples of 45 degrees
    int position = 0;    // quadrant of the primary shape, 0..3
    int size_class = 0;  // 0 small, 1 large
    float noise_sigma = 0.05f;
    uint64_t seed = 0; // render jitter/noise stream
};

enum class Attr { shape, color, count, orientation, position, size };

constexpr std::array<Attr, 5> kFineAttrs = {Attr::color, Attr::count, Attr::orientation,
                                            Attr::position, Attr::size};

int attribute_cardinality(Attr a);
int attribute_value(const SceneSpec& s, Attr a);
void set_attribute_value(SceneSpec& s, Attr a, int v);
const char* attribute_name(Attr a);

// channel-major [3][S][S] in [0,1]; pure function of (spec, spec.seed)
std::vector<float> render_scene(const SceneSpec& spec, int image_size);

struct LabeledImage {
    std::vector<float> image;
    SceneSpec spec;
    int split = 0; // 0 train, 1 val, 2 test
};

struct DataConfig {
    int n = 2048;
    uint64_t seed = 1;
    int image_size = 32;
    float noise_sigma = 0.05f;
};

struct Dataset {
    DataConfig cfg;
    std::vector<LabeledImage> items;

    std::vector<int> split_indices(int split) const;
};

// Uniform attribute sampling, 80/10/10 split with disjoint per-item seed
// ranges (train ids come first, then val, then test).
Dataset generate_dataset(const DataConfig& cfg);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Exact on-disk size: header line plus n fixed-width records.
uint64_t dataset_file_size(int n, int image_size, uint64_t header_bytes);
uint64_t dataset_record_bytes(int image_size);
std::string dataset_header_line(const DataConfig& cfg);

} // namespace genrep
