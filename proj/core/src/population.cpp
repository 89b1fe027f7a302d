#include "cellsynth/population.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cellsynth {

namespace {

// Squared 1D distance transform (Felzenszwalb & Huttenlocher) of f into d.
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
    const int n = int(f.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    int k = 0;
    v[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    for (int q = 1; q < n; ++q) {
        if (f[std::size_t(q)] == inf) continue;
        if (f[std::size_t(v[std::size_t(k)])] == inf) {
            v[std::size_t(k)] = q;
            continue;
        }
        double s;
        while (true) {
            const int p = v[std::size_t(k)];
            s = ((f[std::size_t(q)] + double(q) * q) - (f[std::size_t(p)] + double(p) * p)) / (2.0 * (q - p));
            if (s > z[std::size_t(k)] || k == 0) break;
            --k;
        }
        if (s <= z[std::size_t(k)]) {
            v[std::size_t(k)] = q;
            z[std::size_t(k + 1)] = inf;
            continue;
        }
        ++k;
        v[std::size_t(k)] = q;
        z[std::size_t(k)] = s;
        z[std::size_t(k + 1)] = inf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[std::size_t(k + 1)] < q) ++k;
        const int p = v[std::size_t(k)];
        d[std::size_t(q)] = f[std::size_t(p)] == inf ? inf : double(q - p) * (q - p) + f[std::size_t(p)];
    }
}

struct PreparedCell {
    CellSample cell;  // cropped to its footprint's bounding box
    MaskImage footprint;
    int anchor_x = 0, anchor_y = 0;
};

PreparedCell prepare(const CellSample& in) {
    const std::size_t s = in.mask.slices.size();
    if (s == 0 || in.texture.slices.size() != s) throw InputError("cell needs matching, non-empty texture and mask stacks");
    const int w = in.mask.slices[0].width, h = in.mask.slices[0].height;
    for (std::size_t i = 0; i < s; ++i) {
        const auto& m = in.mask.slices[i];
        const auto& t = in.texture.slices[i];
        if (m.width != w || m.height != h || t.width != w || t.height != h)
            throw InputError("cell texture and mask slices differ in size");
    }
    int x0 = w, y0 = h, x1 = -1, y1 = -1;
    for (const auto& m : in.mask.slices)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (m.at(x, y)) {
                    x0 = std::min(x0, x);
                    y0 = std::min(y0, y);
                    x1 = std::max(x1, x);
                    y1 = std::max(y1, y);
                }
    if (x1 < 0) throw InputError("cell mask is empty");
    PreparedCell out;
    const int cw = x1 - x0 + 1, ch = y1 - y0 + 1;
    out.footprint = MaskImage(cw, ch);
    for (std::size_t i = 0; i < s; ++i) {
        MaskImage m(cw, ch);
        GrayImage t(cw, ch);
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) {
                m.at(x, y) = in.mask.slices[i].at(x + x0, y + y0);
                t.at(x, y) = in.texture.slices[i].at(x + x0, y + y0);
                out.footprint.at(x, y) |= m.at(x, y);
            }
        out.cell.mask.slices.push_back(std::move(m));
        out.cell.texture.slices.push_back(std::move(t));
    }
    out.cell.mask.z = in.mask.z;
    // Footprint pixel closest to the footprint centroid.
    double cx = 0, cy = 0, n = 0;
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            if (out.footprint.at(x, y)) {
                cx += x;
                cy += y;
                ++n;
            }
    cx /= n;
    cy /= n;
    double best = std::numeric_limits<double>::infinity();
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            if (out.footprint.at(x, y)) {
                const double d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                if (d < best) {
                    best = d;
                    out.anchor_x = x;
                    out.anchor_y = y;
                }
            }
    return out;
}

}  // namespace

Image<double> distance_to_foreground(const MaskImage& mask) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const int w = mask.width, h = mask.height;
    Image<double> out(w, h);
    const int n = std::max(w, h);
    const auto len = static_cast<std::size_t>(n);
    std::vector<double> f(len), d(len), z(len + 1);
    std::vector<int> v(len);
    for (int x = 0; x < w; ++x) {
        f.resize(std::size_t(h));
        d.resize(std::size_t(h));
        for (int y = 0; y < h; ++y) f[std::size_t(y)] = mask.at(x, y) ? 0.0 : inf;
        edt_1d(f, d, v, z);
        for (int y = 0; y < h; ++y) out.at(x, y) = d[std::size_t(y)];
    }
    for (int y = 0; y < h; ++y) {
        f.resize(std::size_t(w));
        d.resize(std::size_t(w));
        for (int x = 0; x < w; ++x) f[std::size_t(x)] = out.at(x, y);
        edt_1d(f, d, v, z);
        for (int x = 0; x < w; ++x) out.at(x, y) = std::sqrt(d[std::size_t(x)]);
    }
    return out;
}

bool composite_cell(LabeledFrame& frame, const CellSample& cell, const Placement& at, std::uint16_t label) {
    const std::size_t s = cell.mask.slices.size();
    if (s == 0 || cell.texture.slices.size() != s) throw InputError("cell needs matching texture and mask stacks");
    if (label == 0) throw ContractViolation("label 0 is reserved for background");
    const int w = cell.mask.slices[0].width, h = cell.mask.slices[0].height;
    auto& labels = frame.labels;
    for (std::size_t i = 0; i < s; ++i) {
        const auto& m = cell.mask.slices[i];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!m.at(x, y)) continue;
                const int cx = at.x + x, cy = at.y + y, cz = at.z + int(i);
                if (!labels.contains(cx, cy, cz) || labels.at(cx, cy, cz) != 0) return false;
            }
    }
    for (std::size_t i = 0; i < s; ++i) {
        const auto& m = cell.mask.slices[i];
        const auto& t = cell.texture.slices[i];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (m.at(x, y)) {
                    labels.at(at.x + x, at.y + y, at.z + int(i)) = label;
                    frame.raw.at(at.x + x, at.y + y, at.z + int(i)) = t.at(x, y);
                }
    }
    return true;
}

LabeledFrame synthesize_population(const std::vector<CellSample>& cells, const CanvasSpec& canvas,
                                   const PlacementPolicy& policy, std::uint64_t seed) {
    if (canvas.width < 1 || canvas.height < 1 || canvas.depth < 1) throw RangeError("canvas must be non-empty");
    if (!(policy.clustering_probability >= 0.0 && policy.clustering_probability <= 1.0))
        throw RangeError("clustering probability must lie in [0, 1]");
    if (policy.target_count < 0 || policy.max_attempts < 1 || policy.neighborhood_radius < 0)
        throw RangeError("invalid placement policy");
    if (policy.target_count > std::numeric_limits<std::uint16_t>::max())
        throw RangeError("too many cells for 16-bit labels");
    if (policy.target_count > 0 && cells.empty()) throw InputError("no cells to place");

    LabeledFrame frame;
    frame.raw = Volume<float>(canvas.width, canvas.height, canvas.depth, canvas.background);
    frame.labels = LabelMap(canvas.width, canvas.height, canvas.depth);
    std::vector<PreparedCell> prepared;
    if (policy.target_count > 0)
        for (const auto& c : cells) {
            prepared.push_back(prepare(c));
            const auto& p = prepared.back();
            if (p.footprint.width > canvas.width || p.footprint.height > canvas.height ||
                int(p.cell.mask.slices.size()) > canvas.depth)
                throw InputError("cell of " + std::to_string(p.footprint.width) + "x" +
                                 std::to_string(p.footprint.height) + "x" +
                                 std::to_string(p.cell.mask.slices.size()) + " does not fit the canvas");
        }

    Rng rng(seed);
    MaskImage occupied(canvas.width, canvas.height);  // xy footprint of placed cells
    std::uint16_t next_label = 1;
    for (int k = 0; k < policy.target_count; ++k) {
        const PreparedCell& pc = prepared[std::size_t(k) % prepared.size()];
        const int cw = pc.footprint.width, ch = pc.footprint.height;
        const int cs = int(pc.cell.mask.slices.size());
        const bool cluster = rng.uniform() < policy.clustering_probability;
        std::vector<std::pair<int, int>> near;
        if (cluster && next_label > 1) {
            const auto dist = distance_to_foreground(occupied);
            for (int y = 0; y < canvas.height; ++y)
                for (int x = 0; x < canvas.width; ++x) {
                    const double d = dist.at(x, y);
                    if (d > 0.0 && d <= policy.neighborhood_radius) near.emplace_back(x, y);
                }
        }
        bool done = false;
        Placement at;
        for (int attempt = 0; attempt < policy.max_attempts && !done; ++attempt) {
            if (!near.empty()) {
                const auto [px, py] = near[std::size_t(rng.uniform_int(0, int(near.size()) - 1))];
                at.x = px - pc.anchor_x;
                at.y = py - pc.anchor_y;
            } else {
                at.x = rng.uniform_int(0, canvas.width - cw);
                at.y = rng.uniform_int(0, canvas.height - ch);
            }
            at.z = rng.uniform_int(0, canvas.depth - cs);
            if (at.x < 0 || at.y < 0 || at.x + cw > canvas.width || at.y + ch > canvas.height) continue;
            done = composite_cell(frame, pc.cell, at, next_label);
        }
        if (!done) {
            ++frame.skipped;
            continue;
        }
        ++frame.placed;
        ++next_label;
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x)
                if (pc.footprint.at(x, y)) occupied.at(at.x + x, at.y + y) = 1;
    }
    if (canvas.noise_sigma > 0.0) {
        Rng noise(derive_seed(seed, "sensor-noise"));
        for (auto& v : frame.raw.voxels) v = std::clamp(v + float(canvas.noise_sigma * noise.normal()), 0.0f, 1.0f);
    }
    return frame;
}

float estimate_background(const std::vector<TexturePair>& crops) {
    std::vector<float> values;
    for (const auto& c : crops) {
        if (c.image.width != c.mask.width || c.image.height != c.mask.height)
            throw InputError("crop image and mask differ in size");
        for (std::size_t i = 0; i < c.image.pixels.size(); ++i)
            if (!c.mask.pixels[i]) values.push_back(c.image.pixels[i]);
    }
    if (values.empty()) throw InputError("no background pixels to estimate from");
    auto mid = values.begin() + std::ptrdiff_t(values.size() / 2);
    std::nth_element(values.begin(), mid, values.end());
    return *mid;
}

}  // namespace cellsynth
