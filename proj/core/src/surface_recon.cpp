#include "cellsynth/surface_recon.hpp"

#include <cmath>
#include <numbers>

namespace cellsynth {

namespace {

constexpr std::size_t kChunk = 16384;

std::vector<float> encode(const std::vector<float>& pts, int octaves) {
    const std::size_t n = pts.size() / 3;
    const std::size_t width = 3 + 6 * std::size_t(octaves);
    std::vector<float> out(n * width);
    for (std::size_t i = 0; i < n; ++i) {
        float* row = out.data() + i * width;
        for (int a = 0; a < 3; ++a) row[a] = pts[i * 3 + a];
        for (int k = 0; k < octaves; ++k) {
            const double f = std::ldexp(std::numbers::pi, k);
            for (int a = 0; a < 3; ++a) {
                const double arg = f * pts[i * 3 + a];
                row[3 + 6 * k + a] = float(std::sin(arg));
                row[6 + 6 * k + a] = float(std::cos(arg));
            }
        }
    }
    return out;
}

std::array<double, 3> ray_point(const CameraBasis& b, double u, double v, double t) {
    return {u * b.right[0] + v * b.up[0] + t * b.forward[0], u * b.right[1] + v * b.up[1] + t * b.forward[1],
            u * b.right[2] + v * b.up[2] + t * b.forward[2]};
}

}  // namespace

SDFField::SDFField(const SdfFieldConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), ps_(std::make_shared<nn::ParameterStore>()) {
    if (cfg.octaves < 0 || cfg.hidden < 1 || cfg.hidden_layers < 1) throw RangeError("invalid SDF field configuration");
    if (!(cfg.init_sharpness > 0.0)) throw RangeError("initial sharpness must be positive");
    Rng rng(seed);
    int in = 3 + 6 * cfg.octaves;
    for (int l = 0; l <= cfg.hidden_layers; ++l) {
        const bool last = l == cfg.hidden_layers;
        const int out = last ? 1 : cfg.hidden;
        const std::string name = "sdf.l" + std::to_string(l);
        const std::size_t n = std::size_t(in) * out;
        weights_.push_back(ps_->create(name + ".w", {in, out},
                                       last ? std::vector<float>(n, 0.0f) : nn::init_uniform(n, in, rng)));
        biases_.push_back(ps_->create(name + ".b", {out}, std::vector<float>(std::size_t(out), 0.0f)));
        in = out;
    }
    // s = 10 * softplus(raw)
    raw_sharpness_ = ps_->create("sdf.sharpness", {1}, {float(std::log(std::expm1(cfg.init_sharpness / 10.0)))});
}

nn::Var SDFField::evaluate(const std::vector<float>& points) const {
    const int n = int(points.size() / 3);
    nn::Var h = nn::Var::constant({n, 3 + 6 * cfg_.octaves}, encode(points, cfg_.octaves));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        h = nn::linear(h, weights_[l], biases_[l]);
        if (l + 1 < weights_.size()) h = nn::softplus(h, 10.0f);
    }
    std::vector<float> sphere(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* p = points.data() + 3 * std::size_t(i);
        sphere[std::size_t(i)] = float(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - cfg_.init_radius);
    }
    return nn::add(h, nn::Var::constant({n, 1}, std::move(sphere)));
}

std::vector<float> SDFField::values(const std::vector<float>& points) const {
    nn::NoGradGuard ng;
    std::vector<float> out;
    out.reserve(points.size() / 3);
    for (std::size_t start = 0; start < points.size(); start += 3 * kChunk) {
        const std::size_t end = std::min(points.size(), start + 3 * kChunk);
        std::vector<float> chunk(points.begin() + std::ptrdiff_t(start), points.begin() + std::ptrdiff_t(end));
        const auto v = evaluate(chunk).value();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

nn::Var SDFField::sharpness() const { return nn::scale(nn::softplus(raw_sharpness_), 10.0f); }

double SDFField::sharpness_value() const {
    nn::NoGradGuard ng;
    return sharpness().item();
}

SDFField fit_sdf(const ViewSet& views, const SdfFitOptions& opts, SdfFitReport* report) {
    const std::size_t n_views = views.views.size();
    if (n_views < 4) throw ContractViolation("fit_sdf needs at least 4 views, got " + std::to_string(n_views));
    if (views.poses.size() != n_views) throw ContractViolation("fit_sdf: view and pose counts differ");
    const int side = views.views[0].width;
    std::vector<std::pair<int, int>> fg;  // (view, pixel index)
    for (std::size_t v = 0; v < n_views; ++v) {
        const auto& m = views.views[v];
        if (m.width != side || m.height != side) throw ContractViolation("fit_sdf: views must be square and equal");
        for (std::size_t i = 0; i < m.pixels.size(); ++i)
            if (m.pixels[i]) fg.emplace_back(int(v), int(i));
    }
    if (fg.empty()) throw InputError("fit_sdf: all views are empty");
    if (opts.iterations < 0 || opts.rays_per_iteration < 1 || opts.samples_per_ray < 2)
        throw RangeError("fit_sdf: invalid sampling options");

    SdfFieldConfig fcfg = opts.field;
    // Start as the sphere whose silhouette has the mean observed area.
    const double mean_area = double(fg.size()) / double(n_views);
    fcfg.init_radius = std::sqrt(mean_area / std::numbers::pi) / (kGridFill * side);
    SDFField field(fcfg, opts.seed);

    std::vector<CameraBasis> bases;
    for (const auto& p : views.poses) bases.push_back(camera_basis(p));
    Rng rng(opts.seed ^ 0x5dfULL);
    nn::Adam adam(field.parameters().params(), {.lr = float(opts.learning_rate), .clip_norm = 0.0f});
    const int R = opts.rays_per_iteration, K = opts.samples_per_ray, E = opts.eikonal_points;
    const double dt = (opts.far - opts.near) / K;
    const double h = 1e-2;
    const double cube = 0.5 / kGridFill;
    // Central-difference stencil: [+x, -x, +y, -y, +z, -z] -> gradient.
    std::vector<float> stencil(18, 0.0f);
    for (int a = 0; a < 3; ++a) {
        stencil[std::size_t((2 * a) * 3 + a)] = float(0.5 / h);
        stencil[std::size_t((2 * a + 1) * 3 + a)] = float(-0.5 / h);
    }
    const nn::Var stencil_w = nn::Var::constant({6, 3}, stencil);
    const nn::Var no_bias;
    SdfFitReport rep;

    for (int it = 0; it < opts.iterations; ++it) {
        const double progress = double(it) / std::max(1, opts.iterations - 1);
        const double floor = opts.final_learning_rate_fraction;
        adam.set_lr(float(opts.learning_rate * (floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * progress)))));
        std::vector<float> pts;
        pts.reserve(std::size_t(R) * K * 3 + std::size_t(E) * 18);
        std::vector<float> labels(static_cast<std::size_t>(R));
        for (int r = 0; r < R; ++r) {
            int v, pix;
            if (rng.uniform() < opts.foreground_ray_fraction) {
                const auto& pick = fg[std::size_t(rng.uniform_int(0, int(fg.size()) - 1))];
                v = pick.first;
                pix = pick.second;
            } else {
                v = rng.uniform_int(0, int(n_views) - 1);
                pix = rng.uniform_int(0, side * side - 1);
            }
            labels[std::size_t(r)] = views.views[std::size_t(v)].pixels[std::size_t(pix)] ? 1.0f : 0.0f;
            const double u = grid_coordinate(pix % side, side), w = -grid_coordinate(pix / side, side);
            const double jitter = rng.uniform();
            for (int k = 0; k < K; ++k) {
                const auto p = ray_point(bases[std::size_t(v)], u, w, opts.near + (k + jitter) * dt);
                pts.insert(pts.end(), {float(p[0]), float(p[1]), float(p[2])});
            }
        }
        for (int e = 0; e < E; ++e) {
            std::array<double, 3> c;
            if (e % 2 == 0) {
                for (auto& x : c) x = cube * (2.0 * rng.uniform() - 1.0);
            } else {
                const std::size_t k = std::size_t(rng.uniform_int(0, R * K - 1));
                c = {pts[3 * k], pts[3 * k + 1], pts[3 * k + 2]};
            }
            for (int a = 0; a < 3; ++a)
                for (int sgn : {1, -1}) {
                    std::array<double, 3> q = c;
                    q[std::size_t(a)] += sgn * h;
                    pts.insert(pts.end(), {float(q[0]), float(q[1]), float(q[2])});
                }
        }
        nn::Var f = field.evaluate(pts);
        nn::Var ray_f = nn::reshape(nn::slice_rows(f, 0, R * K), {R, K});
        nn::Var opacity = nn::sdf_opacity(ray_f, field.sharpness());
        nn::Var loss = nn::bce(opacity, labels);
        if (E > 0 && opts.eikonal_weight > 0.0) {
            nn::Var stencil_f = nn::reshape(nn::slice_rows(f, R * K, R * K + 6 * E), {E, 6});
            nn::Var grad = nn::linear(stencil_f, stencil_w, no_bias);
            nn::Var eik = nn::mse(nn::row_norm(grad), std::vector<float>(std::size_t(E), 1.0f));
            loss = nn::add(loss, nn::scale(eik, float(opts.eikonal_weight)));
        }
        const double value = loss.item();
        if (!std::isfinite(value)) throw OptimizationFailure("SDF fit diverged at iteration " + std::to_string(it));
        loss.backward();
        adam.step();
        rep.losses.push_back(value);
        if (opts.on_step) opts.on_step(it, value);
    }
    rep.final_sharpness = field.sharpness_value();
    if (report) *report = std::move(rep);
    return field;
}

ViewSet render_field(const SDFField& field, const std::vector<CameraPose>& poses, int side, int samples, double near,
                     double far) {
    if (poses.empty()) throw ContractViolation("render_field: no poses");
    nn::NoGradGuard ng;
    const nn::Var s = field.sharpness();
    const double dt = (far - near) / samples;
    ViewSet out;
    out.poses = poses;
    const int rows_per_chunk = std::max(1, int(kChunk) / (side * samples));
    for (const auto& pose : poses) {
        const CameraBasis b = camera_basis(pose);
        MaskImage img(side, side);
        for (int y0 = 0; y0 < side; y0 += rows_per_chunk) {
            const int y1 = std::min(side, y0 + rows_per_chunk);
            std::vector<float> pts;
            for (int py = y0; py < y1; ++py)
                for (int px = 0; px < side; ++px) {
                    const double u = grid_coordinate(px, side), w = -grid_coordinate(py, side);
                    for (int k = 0; k < samples; ++k) {
                        const auto p = ray_point(b, u, w, near + (k + 0.5) * dt);
                        pts.insert(pts.end(), {float(p[0]), float(p[1]), float(p[2])});
                    }
                }
            const int rays = (y1 - y0) * side;
            nn::Var f = nn::Var::constant({rays, samples}, field.values(pts));
            const auto op = nn::sdf_opacity(f, s).value();
            for (int r = 0; r < rays; ++r) img.pixels[std::size_t(y0 * side + r)] = op[std::size_t(r)] > 0.5f ? 1 : 0;
        }
        out.views.push_back(std::move(img));
    }
    return out;
}

double eikonal_residual(const SDFField& field, int points, std::uint64_t seed) {
    if (points < 1) throw RangeError("eikonal_residual needs at least one point");
    Rng rng(seed);
    const double h = 1e-3, cube = 0.5 / kGridFill;
    std::vector<float> pts;
    for (int i = 0; i < points; ++i) {
        std::array<double, 3> c;
        for (auto& x : c) x = cube * (2.0 * rng.uniform() - 1.0);
        for (int a = 0; a < 3; ++a)
            for (int sgn : {1, -1}) {
                auto q = c;
                q[std::size_t(a)] += sgn * h;
                pts.insert(pts.end(), {float(q[0]), float(q[1]), float(q[2])});
            }
    }
    const auto f = field.values(pts);
    double acc = 0.0;
    for (int i = 0; i < points; ++i) {
        double g2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double g = (f[std::size_t(6 * i + 2 * a)] - f[std::size_t(6 * i + 2 * a + 1)]) / (2 * h);
            g2 += g * g;
        }
        acc += std::pow(std::sqrt(g2) - 1.0, 2);
    }
    return acc / points;
}

namespace {

VoxelVolume finish_volume(VoxelVolume vol) {
    if (keep_largest_component(vol) == 0) throw ReconstructionFailure("reconstructed volume is empty");
    return vol;
}

}  // namespace

VoxelVolume extract_volume(const SDFField& field, int resolution) {
    if (resolution < 1) throw RangeError("extract_volume: resolution must be positive");
    const int d = resolution;
    std::vector<float> pts;
    pts.reserve(std::size_t(d) * d * d * 3);
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x)
                pts.insert(pts.end(),
                           {float(grid_coordinate(x, d)), float(grid_coordinate(y, d)), float(grid_coordinate(z, d))});
    const auto f = field.values(pts);
    VoxelVolume vol(d, d, d);
    for (std::size_t i = 0; i < f.size(); ++i) vol.voxels[i] = f[i] < 0.0f ? 1 : 0;
    return finish_volume(std::move(vol));
}

VoxelVolume extract_volume(const std::function<double(double, double, double)>& sdf, int resolution) {
    if (resolution < 1) throw RangeError("extract_volume: resolution must be positive");
    const int d = resolution;
    VoxelVolume vol(d, d, d);
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x)
                vol.at(x, y, z) = sdf(grid_coordinate(x, d), grid_coordinate(y, d), grid_coordinate(z, d)) < 0.0 ? 1 : 0;
    return finish_volume(std::move(vol));
}

MaskStack slice_volume(const VoxelVolume& volume, int slices, int height, int width) {
    if (slices < 1) throw RangeError("slice count must be at least 1");
    if (height < 1 || width < 1) throw RangeError("slice size must be positive");
    int zmin = volume.depth, zmax = -1;
    for (int z = 0; z < volume.depth; ++z)
        for (int y = 0; y < volume.height && (z < zmin || z > zmax); ++y)
            for (int x = 0; x < volume.width; ++x)
                if (volume.at(x, y, z)) {
                    zmin = std::min(zmin, z);
                    zmax = std::max(zmax, z);
                    break;
                }
    if (zmax < 0) throw ReconstructionFailure("cannot slice an empty volume");
    const double extent = double(zmax + 1 - zmin);
    MaskStack out;
    for (int s = 0; s < slices; ++s) {
        // Plane centre in continuous voxel coordinates; voxel i spans [i, i+1).
        const double pos = zmin + (s + 0.5) * extent / slices;
        const int z = std::clamp(int(std::lround(pos - 0.5)), zmin, zmax);
        MaskImage img(width, height);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const int sx = std::min(volume.width - 1, int((x + 0.5) * volume.width / width));
                const int sy = std::min(volume.height - 1, int((y + 0.5) * volume.height / height));
                img.at(x, y) = volume.at(sx, sy, z);
            }
        out.slices.push_back(std::move(img));
        out.z.push_back(pos);
    }
    return out;
}

double volume_iou(const VoxelVolume& a, const VoxelVolume& b) {
    if (a.voxels.size() != b.voxels.size()) throw ContractViolation("volume_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.voxels.size(); ++i) {
        inter += a.voxels[i] && b.voxels[i];
        uni += a.voxels[i] || b.voxels[i];
    }
    return uni ? double(inter) / double(uni) : 1.0;
}

double mean_view_iou(const ViewSet& a, const ViewSet& b) {
    if (a.views.size() != b.views.size() || a.views.empty()) throw ContractViolation("mean_view_iou: view counts differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.views.size(); ++i) acc += mask_iou(a.views[i], b.views[i]);
    return acc / double(a.views.size());
}

}  // namespace cellsynth
