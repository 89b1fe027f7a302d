#include "cellsynth/toy.hpp"

#include <cmath>
#include <numbers>

namespace cellsynth::toy {

MaskImage ellipse_mask(int size, Rng& rng, double min_axis, double max_axis) {
    MaskImage m(size, size);
    const double a = size * (min_axis + (max_axis - min_axis) * rng.uniform());
    const double b = size * (min_axis + (max_axis - min_axis) * rng.uniform());
    const double th = std::numbers::pi * rng.uniform();
    const double cx = 0.5 * size + 0.06 * size * (rng.uniform() - 0.5);
    const double cy = 0.5 * size + 0.06 * size * (rng.uniform() - 0.5);
    const double c = std::cos(th), s = std::sin(th);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
            m.at(x, y) = u * u + v * v <= 1.0 ? 1 : 0;
        }
    if (foreground_area(m) == 0) m.at(size / 2, size / 2) = 1;
    return m;
}

std::vector<MaskImage> ellipse_masks(int count, int size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<MaskImage> out;
    for (int i = 0; i < count; ++i) out.push_back(ellipse_mask(size, rng));
    return out;
}

GrayImage cell_texture(const MaskImage& mask, Rng& rng) {
    const int w = mask.width, h = mask.height;
    GrayImage img(w, h);
    // Distance to the background, capped, gives the rim darkening.
    std::vector<float> depth(std::size_t(w) * h, 0.0f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!mask.at(x, y)) continue;
            int d = 4;
            for (int r = 1; r < 4 && d == 4; ++r)
                for (int oy = -r; oy <= r && d == 4; ++oy)
                    for (int ox = -r; ox <= r; ++ox) {
                        const int sx = x + ox, sy = y + oy;
                        if (!mask.contains(sx, sy) || !mask.at(sx, sy)) {
                            d = r;
                            break;
                        }
                    }
            depth[std::size_t(y) * w + x] = float(d) / 4.0f;
        }
    const double f1 = 0.3 + 0.3 * rng.uniform(), f2 = 0.3 + 0.3 * rng.uniform();
    const double p1 = 6.28 * rng.uniform(), p2 = 6.28 * rng.uniform();
    const float base = float(0.65 + 0.15 * rng.uniform());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = std::size_t(y) * w + x;
            float v;
            if (mask.pixels[i]) {
                const double grain = 0.08 * std::sin(f1 * x + p1) * std::sin(f2 * y + p2);
                v = float(base * (0.6 + 0.4 * depth[i]) + grain + 0.03 * rng.normal());
            } else {
                v = float(0.1 + 0.03 * rng.normal());
            }
            img.pixels[i] = std::clamp(v, 0.0f, 1.0f);
        }
    return img;
}

std::vector<CellPair> cell_pairs(int count, int size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<CellPair> out;
    for (int i = 0; i < count; ++i) {
        CellPair p;
        p.mask = ellipse_mask(size, rng);
        p.image = cell_texture(p.mask, rng);
        out.push_back(std::move(p));
    }
    return out;
}

MaskImage disc_mask(int size, double radius, double cx, double cy) {
    if (cx < 0) cx = 0.5 * size;
    if (cy < 0) cy = 0.5 * size;
    MaskImage m(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            m.at(x, y) = dx * dx + dy * dy <= radius * radius ? 1 : 0;
        }
    return m;
}

}  // namespace cellsynth::toy
