// SPDX-License-Identifier: Apache-2.0
#include "genrep/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace genrep {

namespace {

constexpr std::array<std::array<float, 3>, 6> kHues = {{
    {1.0f, 0.15f, 0.15f}, // red
    {1.0f, 0.95f, 0.15f}, // yellow
    {0.15f, 0.9f, 0.2f},  // green
    {0.1f, 0.9f, 0.9f},   // cyan
    {0.2f, 0.25f, 1.0f},  // blue
    {0.95f, 0.2f, 0.95f}, // magenta
}};

constexpr float kBackground = 0.5f;

struct Placed {
    float cx, cy, r;
    float cos_a, sin_a;
    int shape;
};

bool inside_shape(const Placed& p, float x, float y) {
    const float dx = x - p.cx;
    const float dy = y - p.cy;
    // rotate into the shape frame
    const float lx = dx * p.cos_a + dy * p.sin_a;
    const float ly = -dx * p.sin_a + dy * p.cos_a;
    switch (p.shape) {
    case 0: // circle
        return dx * dx + dy * dy <= p.r * p.r;
    case 1: { // square
        const float h = p.r * 0.82f;
        return std::abs(lx) <= h && std::abs(ly) <= h;
    }
    case 2: { // triangle, point up at orientation 0
        const float yy = -ly; // image y grows downward
        if (yy > p.r || yy < -0.5f * p.r) {
            return false;
        }
        const float half_width = (p.r - yy) * 0.5773503f; // tan(30 deg)
        return std::abs(lx) <= half_width;
    }
    default: { // cross
        const float arm = p.r * 0.38f;
        return (std::abs(lx) <= p.r && std::abs(ly) <= arm) ||
               (std::abs(ly) <= p.r && std::abs(lx) <= arm);
    }
    }
}

float quadrant_cx(int q, int s) { return ((q % 2) == 0 ? 0.27f : 0.73f) * static_cast<float>(s); }
float quadrant_cy(int q, int s) { return (q < 2 ? 0.27f : 0.73f) * static_cast<float>(s); }

} // namespace

int attribute_cardinality(Attr a) {
    switch (a) {
    case Attr::shape:
        return 4;
    case Attr::color:
        return 6;
    case Attr::count:
        return 4;
    case Attr::orientation:
        return 4;
    case Attr::position:
        return 4;
    case Attr::size:
        return 2;
    }
    return 0;
}

int attribute_value(const SceneSpec& s, Attr a) {
    switch (a) {
    case Attr::shape:
        return s.shape_class;
    case Attr::color:
        return s.color;
    case Attr::count:
        return s.count - 1;
    case Attr::orientation:
        return s.orientation;
    case Attr::position:
        return s.position;
    case Attr::size:
        return s.size_class;
    }
    return 0;
}

void set_attribute_value(SceneSpec& s, Attr a, int v) {
    switch (a) {
    case Attr::shape:
        s.shape_class = v;
        break;
    case Attr::color:
        s.color = v;
        break;
    case Attr::count:
        s.count = v + 1;
        break;
    case Attr::orientation:
        s.orientation = v;
        break;
    case Attr::position:
        s.position = v;
        break;
    case Attr::size:
        s.size_class = v;
        break;
    }
}

const char* attribute_name(Attr a) {
    switch (a) {
    case Attr::shape:
        return "shape";
    case Attr::color:
        return "color";
    case Attr::count:
        return "count";
    case Attr::orientation:
        return "orientation";
    case Attr::position:
        return "position";
    case Attr::size:
        return "size";
    }
    return "?";
}

std::vector<float> render_scene(const SceneSpec& spec, int image_size) {
    const int S = image_size;
    Rng rng(spec.seed);
    std::vector<Placed> shapes;

    const float base_r = (spec.size_class == 0 ? 0.115f : 0.185f) * static_cast<float>(S);
    const float angle = static_cast<float>(spec.orientation) * 0.7853981634f;
    const float jit = 0.04f * static_cast<float>(S);

    Placed primary;
    primary.cx = quadrant_cx(spec.position, S) + static_cast<float>(rng.uniform(-jit, jit));
    primary.cy = quadrant_cy(spec.position, S) + static_cast<float>(rng.uniform(-jit, jit));
    primary.r = base_r;
    primary.cos_a = std::cos(angle);
    primary.sin_a = std::sin(angle);
    primary.shape = spec.shape_class;
    shapes.push_back(primary);

    // count-1 smaller copies in the remaining quadrants, seeded order
    std::array<int, 3> others{};
    int k = 0;
    for (int q = 0; q < 4; ++q) {
        if (q != spec.position) {
            others[static_cast<size_t>(k++)] = q;
        }
    }
    for (int i = 2; i >= 1; --i) {
        const int j = rng.uniform_int(i + 1);
        std::swap(others[static_cast<size_t>(i)], others[static_cast<size_t>(j)]);
    }
    for (int c = 1; c < spec.count; ++c) {
        Placed extra = primary;
        const int q = others[static_cast<size_t>(c - 1)];
        extra.cx = quadrant_cx(q, S) + static_cast<float>(rng.uniform(-jit, jit));
        extra.cy = quadrant_cy(q, S) + static_cast<float>(rng.uniform(-jit, jit));
        extra.r = base_r * 0.55f;
        shapes.push_back(extra);
    }

    const float brightness = static_cast<float>(rng.uniform(0.72, 1.0));
    const std::array<float, 3>& hue = kHues[static_cast<size_t>(spec.color)];

    std::vector<float> img(static_cast<size_t>(3) * S * S, kBackground);
    // 3x3 subsample coverage
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            int hits = 0;
            for (int sy = 0; sy < 3; ++sy) {
                for (int sx = 0; sx < 3; ++sx) {
                    const float fx = static_cast<float>(x) + (static_cast<float>(sx) + 0.5f) / 3.0f;
                    const float fy = static_cast<float>(y) + (static_cast<float>(sy) + 0.5f) / 3.0f;
                    for (const Placed& p : shapes) {
                        if (inside_shape(p, fx, fy)) {
                            ++hits;
                            break;
                        }
                    }
                }
            }
            if (hits > 0) {
                const float cov = static_cast<float>(hits) / 9.0f;
                for (int c = 0; c < 3; ++c) {
                    float& px = img[(static_cast<size_t>(c) * S + y) * S + x];
                    px = px * (1.0f - cov) + hue[static_cast<size_t>(c)] * brightness * cov;
                }
            }
        }
    }
    if (spec.noise_sigma > 0.0f) {
        for (float& v : img) {
            v = std::clamp(v + static_cast<float>(rng.normal()) * spec.noise_sigma, 0.0f, 1.0f);
        }
    }
    return img;
}

std::vector<int> Dataset::split_indices(int split) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(items.size()); ++i) {
        if (items[static_cast<size_t>(i)].split == split) {
            out.push_back(i);
        }
    }
    return out;
}

Dataset generate_dataset(const DataConfig& cfg) {
    if (cfg.n < 1) {
        throw ContractError("generate_dataset: n must be >= 1");
    }
    Dataset ds;
    ds.cfg = cfg;
    ds.items.resize(static_cast<size_t>(cfg.n));
    const int n_train = static_cast<int>(cfg.n * 8L / 10);
    const int n_val = static_cast<int>(cfg.n * 1L / 10);
    const uint64_t base = splitmix64(cfg.seed);
    for (int i = 0; i < cfg.n; ++i) {
        LabeledImage& it = ds.items[static_cast<size_t>(i)];
        it.split = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
        const uint64_t item_seed = base + static_cast<uint64_t>(i);
        Rng rng(item_seed);
        it.spec.shape_class = rng.uniform_int(4);
        it.spec.color = rng.uniform_int(6);
        it.spec.count = 1 + rng.uniform_int(4);
        it.spec.orientation = rng.uniform_int(4);
        it.spec.position = rng.uniform_int(4);
        it.spec.size_class = rng.uniform_int(2);
        it.spec.noise_sigma = cfg.noise_sigma;
        it.spec.seed = splitmix64(item_seed ^ 0xbadcafeULL);
        it.image = render_scene(it.spec, cfg.image_size);
    }
    return ds;
}

uint64_t dataset_record_bytes(int image_size) {
    // fixed-width spec line (all enum fields single-digit, seed as 16 hex
    // chars) + raw float payload
    const uint64_t spec_line = 75;
    return spec_line + static_cast<uint64_t>(3) * image_size * image_size * sizeof(float);
}

std::string dataset_header_line(const DataConfig& cfg) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"n\":%d,\"image_size\":%d,\"seed\":%llu,\"noise_sigma\":%.6f,"
                  "\"schema\":\"shape4.color6.count4.orient4.pos4.size2\",\"record_bytes\":%llu}\n",
                  cfg.n, cfg.image_size, static_cast<unsigned long long>(cfg.seed),
                  static_cast<double>(cfg.noise_sigma),
                  static_cast<unsigned long long>(dataset_record_bytes(cfg.image_size)));
    return buf;
}

uint64_t dataset_file_size(int n, int image_size, uint64_t header_bytes) {
    return header_bytes + static_cast<uint64_t>(n) * dataset_record_bytes(image_size);
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot write dataset: " + path);
    }
    f << dataset_header_line(ds.cfg);
    for (const LabeledImage& it : ds.items) {
        char line[96];
        std::snprintf(line, sizeof(line),
                      "{\"sc\":%d,\"co\":%d,\"ct\":%d,\"or\":%d,\"po\":%d,\"sz\":%d,\"sp\":%d,"
                      "\"sd\":\"%016llx\"}\n",
                      it.spec.shape_class, it.spec.color, it.spec.count, it.spec.orientation,
                      it.spec.position, it.spec.size_class, it.split,
                      static_cast<unsigned long long>(it.spec.seed));
        f << line;
        f.write(reinterpret_cast<const char*>(it.image.data()),
                static_cast<std::streamsize>(it.image.size() * sizeof(float)));
    }
    if (!f) {
        throw IoError("short write on dataset: " + path);
    }
}

Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open dataset: " + path);
    }
    std::string header;
    std::getline(f, header);
    Dataset ds;
    int n = 0;
    unsigned long long seed = 0;
    double sigma = 0.0;
    if (std::sscanf(header.c_str(), "{\"n\":%d,\"image_size\":%d,\"seed\":%llu,\"noise_sigma\":%lf",
                    &n, &ds.cfg.image_size, &seed, &sigma) != 4) {
        throw IoError("malformed dataset header: " + path);
    }
    ds.cfg.n = n;
    ds.cfg.seed = seed;
    ds.cfg.noise_sigma = static_cast<float>(sigma);
    ds.items.resize(static_cast<size_t>(n));
    const size_t pixels = static_cast<size_t>(3) * ds.cfg.image_size * ds.cfg.image_size;
    for (int i = 0; i < n; ++i) {
        std::string line;
        std::getline(f, line);
        LabeledImage& it = ds.items[static_cast<size_t>(i)];
        unsigned long long sd = 0;
        if (std::sscanf(line.c_str(),
                        "{\"sc\":%d,\"co\":%d,\"ct\":%d,\"or\":%d,\"po\":%d,\"sz\":%d,\"sp\":%d,"
                        "\"sd\":\"%llx\"}",
                        &it.spec.shape_class, &it.spec.color, &it.spec.count, &it.spec.orientation,
                        &it.spec.position, &it.spec.size_class, &it.split, &sd) != 8) {
            throw IoError("malformed dataset record in " + path);
        }
        it.spec.seed = sd;
        it.spec.noise_sigma = ds.cfg.noise_sigma;
        it.image.resize(pixels);
        f.read(reinterpret_cast<char*>(it.image.data()),
               static_cast<std::streamsize>(pixels * sizeof(float)));
        if (!f) {
            throw IoError("truncated dataset: " + path);
        }
    }
    return ds;
}

} // namespace genrep
