#include "cellsynth/shape_library.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "cellsynth/image_io.hpp"

namespace cellsynth {

namespace {

constexpr double kPi = std::numbers::pi;

double factorial_ratio(int l, int m) {
    // (l - m)! / (l + m)!
    double r = 1.0;
    for (int k = l - m + 1; k <= l + m; ++k) r /= k;
    return r;
}

std::array<double, 3> normalize(std::array<double, 3> v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

std::array<double, 3> cross(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

}  // namespace

double real_spherical_harmonic(int l, int m, double theta, double phi) {
    const int am = std::abs(m);
    if (am > l) throw RangeError("|m| must not exceed l");
    const double k = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi) * factorial_ratio(l, am));
    const double p = std::assoc_legendre(unsigned(l), unsigned(am), std::cos(theta));
    if (m == 0) return k * p;
    if (m > 0) return std::sqrt(2.0) * k * std::cos(am * phi) * p;
    return std::sqrt(2.0) * k * std::sin(am * phi) * p;
}

std::size_t SphericalHarmonicShape::coefficient_count(int order, int degree) {
    std::size_t n = 0;
    for (int l = 0; l <= order; ++l) n += std::size_t(2 * std::min(l, degree) + 1);
    return n;
}

double SphericalHarmonicShape::raw_radius(double theta, double phi) const {
    double acc = 0.0;
    std::size_t i = 0;
    for (int l = 0; l <= order; ++l) {
        const int mm = std::min(l, degree);
        for (int m = -mm; m <= mm; ++m) acc += coefficients[i++] * real_spherical_harmonic(l, m, theta, phi);
    }
    return std::abs(acc);
}

double SphericalHarmonicShape::radius_along(double x, double y, double z) const {
    const double r = std::sqrt(x * x + y * y + z * z);
    return radius(std::acos(std::clamp(z / r, -1.0, 1.0)), std::atan2(y, x));
}

SphericalHarmonicShape generate_sh_shape(std::uint64_t seed, int order, int degree) {
    if (order < 0 || degree < 0) throw RangeError("spherical harmonic order and degree must be non-negative");
    SphericalHarmonicShape s;
    s.order = order;
    s.degree = degree;
    s.seed = seed;
    Rng rng(seed);
    s.coefficients.resize(SphericalHarmonicShape::coefficient_count(order, degree));
    for (auto& c : s.coefficients) c = rng.normal();
    // Maximum over a dense grid, refined around the best cell.
    double best = 0.0, bt = 0.0, bp = 0.0;
    const int nt = 96, np = 192;
    for (int i = 0; i <= nt; ++i)
        for (int j = 0; j < np; ++j) {
            const double th = kPi * i / nt, ph = 2 * kPi * j / np;
            const double r = s.raw_radius(th, ph);
            if (r > best) best = r, bt = th, bp = ph;
        }
    double step_t = kPi / nt, step_p = 2 * kPi / np;
    for (int it = 0; it < 24; ++it) {
        bool moved = false;
        for (int dt = -1; dt <= 1; ++dt)
            for (int dp = -1; dp <= 1; ++dp) {
                const double th = std::clamp(bt + dt * step_t, 0.0, kPi), ph = bp + dp * step_p;
                const double r = s.raw_radius(th, ph);
                if (r > best) best = r, bt = th, bp = ph, moved = true;
            }
        if (!moved) step_t *= 0.5, step_p *= 0.5;
    }
    if (!(best > 0.0)) throw GenerationFailure("degenerate spherical harmonic shape (zero radius)");
    s.normalization = 1.0 / best;
    return s;
}

CameraBasis camera_basis(const CameraPose& pose) {
    if (pose.elevation < -kPi / 2 - 1e-12 || pose.elevation > kPi / 2 + 1e-12)
        throw RangeError("camera elevation must lie in [-pi/2, pi/2]");
    CameraBasis b;
    const double ce = std::cos(pose.elevation), se = std::sin(pose.elevation);
    b.forward = {-ce * std::cos(pose.azimuth), -ce * std::sin(pose.azimuth), -se};
    auto r = cross(b.forward, {0.0, 0.0, 1.0});
    // Looking straight up or down: pick "right" from the azimuth instead.
    if (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] < 1e-12) r = {std::sin(pose.azimuth), -std::cos(pose.azimuth), 0.0};
    b.right = normalize(r);
    b.up = cross(b.right, b.forward);
    return b;
}

VoxelVolume voxelize(const SphericalHarmonicShape& shape, int resolution) {
    if (resolution < 8) throw RangeError("voxel resolution must be at least 8");
    const int d = resolution;
    VoxelVolume vol(d, d, d);
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) {
                const double px = grid_coordinate(x, d), py = grid_coordinate(y, d), pz = grid_coordinate(z, d);
                const double r2 = px * px + py * py + pz * pz;
                if (r2 > 1.0) continue;
                const double r = shape.radius_along(px, py, pz);
                vol.at(x, y, z) = r2 <= r * r ? 1 : 0;
            }
    return vol;
}

ViewSet render_silhouettes(const VoxelVolume& volume, const std::vector<CameraPose>& poses, int side) {
    if (poses.empty()) throw ContractViolation("render_silhouettes: no poses");
    if (side < 1) throw RangeError("render_silhouettes: side must be positive");
    if (volume.width != volume.height || volume.width != volume.depth)
        throw ContractViolation("render_silhouettes: volume must be a cube");
    const int d = volume.width;
    const double voxel = 1.0 / (kGridFill * d);
    const double half_extent = 0.5 / kGridFill * std::sqrt(3.0);
    const double h = 0.5 * voxel;
    const int k_half = int(std::ceil(half_extent / h));
    // Trilinear occupancy at a world point, in voxel units.
    auto occupancy = [&](double wx, double wy, double wz) {
        const double fx = wx * kGridFill * d + 0.5 * d - 0.5;
        const double fy = wy * kGridFill * d + 0.5 * d - 0.5;
        const double fz = wz * kGridFill * d + 0.5 * d - 0.5;
        const int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
        const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
            const int x = x0 + (c & 1), y = y0 + ((c >> 1) & 1), z = z0 + ((c >> 2) & 1);
            if (!volume.contains(x, y, z) || !volume.at(x, y, z)) continue;
            acc += ((c & 1) ? tx : 1 - tx) * (((c >> 1) & 1) ? ty : 1 - ty) * (((c >> 2) & 1) ? tz : 1 - tz);
        }
        return acc;
    };
    ViewSet out;
    out.poses = poses;
    for (const auto& pose : poses) {
        const CameraBasis b = camera_basis(pose);
        MaskImage img(side, side);
        for (int py = 0; py < side; ++py)
            for (int px = 0; px < side; ++px) {
                const double u = grid_coordinate(px, side), v = -grid_coordinate(py, side);
                std::uint8_t hit = 0;
                for (int k = -k_half; k <= k_half && !hit; ++k) {
                    const double t = k * h;
                    if (occupancy(u * b.right[0] + v * b.up[0] + t * b.forward[0],
                                  u * b.right[1] + v * b.up[1] + t * b.forward[1],
                                  u * b.right[2] + v * b.up[2] + t * b.forward[2]) >= 0.5)
                        hit = 1;
                }
                img.at(px, py) = hit;
            }
        out.views.push_back(std::move(img));
    }
    return out;
}

std::vector<CameraPose> sample_pose_ring(int count, double elevation) {
    if (count < 1) throw RangeError("pose ring needs at least one view");
    std::vector<CameraPose> out;
    for (int i = 0; i < count; ++i) out.push_back({2.0 * kPi * i / count, elevation, 2.0});
    return out;
}

CameraPose random_pose(Rng& rng) {
    const double az = 2.0 * kPi * rng.uniform();
    const double el = std::asin(2.0 * rng.uniform() - 1.0);
    return {az, el, 2.0};
}

ShapeRecord make_shape_record(std::uint64_t seed, const ShapeCorpusOptions& opts) {
    ShapeRecord rec;
    rec.shape = generate_sh_shape(seed, opts.order, opts.degree);
    const VoxelVolume vol = voxelize(rec.shape, opts.voxel_resolution);
    rec.ring = render_silhouettes(vol, sample_pose_ring(opts.views, opts.ring_elevation), opts.view_size);
    Rng rng(splitmix64(seed));
    rec.condition_pose = random_pose(rng);
    rec.condition = render_silhouettes(vol, {rec.condition_pose}, opts.view_size).views[0];
    return rec;
}

namespace {

nlohmann::json pose_json(const CameraPose& p) {
    return {{"azimuth", p.azimuth}, {"elevation", p.elevation}, {"distance", p.distance}};
}

CameraPose pose_from(const nlohmann::json& j) {
    return {j.at("azimuth").get<double>(), j.at("elevation").get<double>(), j.at("distance").get<double>()};
}

std::string view_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%02zu.png", i);
    return buf;
}

}  // namespace

void save_shape_record(const std::filesystem::path& dir, const ShapeRecord& rec) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["seed"] = rec.shape.seed;
    meta["order"] = rec.shape.order;
    meta["degree"] = rec.shape.degree;
    meta["coefficients"] = rec.shape.coefficients;
    meta["normalization"] = rec.shape.normalization;
    meta["condition_pose"] = pose_json(rec.condition_pose);
    nlohmann::json poses = nlohmann::json::array();
    for (std::size_t i = 0; i < rec.ring.views.size(); ++i) {
        poses.push_back(pose_json(rec.ring.poses[i]));
        write_mask_png(dir / view_name(i), rec.ring.views[i]);
    }
    meta["poses"] = poses;
    write_mask_png(dir / "condition.png", rec.condition);
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

ShapeRecord load_shape_record(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IoError("missing shape metadata: " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("corrupt shape metadata in " + dir.string() + ": " + e.what());
    }
    ShapeRecord rec;
    rec.shape.seed = meta.at("seed").get<std::uint64_t>();
    rec.shape.order = meta.at("order").get<int>();
    rec.shape.degree = meta.at("degree").get<int>();
    rec.shape.coefficients = meta.at("coefficients").get<std::vector<double>>();
    rec.shape.normalization = meta.at("normalization").get<double>();
    rec.condition_pose = pose_from(meta.at("condition_pose"));
    const auto& poses = meta.at("poses");
    for (std::size_t i = 0; i < poses.size(); ++i) {
        rec.ring.poses.push_back(pose_from(poses[i]));
        rec.ring.views.push_back(read_mask_png(dir / view_name(i)));
    }
    rec.condition = read_mask_png(dir / "condition.png");
    return rec;
}

std::vector<ShapeRecord> load_shape_corpus(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IoError("shape corpus directory not found: " + root.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory() && std::filesystem::exists(e.path() / "meta.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<ShapeRecord> out;
    for (const auto& d : dirs) out.push_back(load_shape_record(d));
    if (out.empty()) throw InputError("shape corpus is empty: " + root.string());
    return out;
}

}  // namespace cellsynth
