#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cellsynth/surface_recon.hpp"

using namespace cellsynth;

namespace {

constexpr double kRingElevation = std::numbers::pi / 6;

struct SphereFit {
    VoxelVolume source;
    ViewSet views;
    SDFField field;
    SdfFitReport report;
};

// One shared fit keeps the suite fast on small machines.
const SphereFit& sphere_fit() {
    static const SphereFit fit = [] {
        auto source = voxelize(generate_sh_shape(1, 0, 0), 48);
        auto views = render_silhouettes(source, sample_pose_ring(16, kRingElevation), 48);
        SdfFitOptions opts;
        opts.iterations = 300;
        opts.rays_per_iteration = 192;
        opts.samples_per_ray = 48;
        opts.seed = 5;
        SdfFitReport report;
        auto field = fit_sdf(views, opts, &report);
        return SphereFit{std::move(source), std::move(views), std::move(field), std::move(report)};
    }();
    return fit;
}

VoxelVolume analytic_sphere(int d, double r) {
    return extract_volume([r](double x, double y, double z) { return std::sqrt(x * x + y * y + z * z) - r; }, d);
}

}  // namespace

TEST(FitSdf, SphereViewsReRender) {
    const auto& fit = sphere_fit();
    auto rendered = render_field(fit.field, fit.views.poses, 48);
    for (std::size_t i = 0; i < rendered.views.size(); ++i)
        EXPECT_GE(mask_iou(rendered.views[i], fit.views.views[i]), 0.95) << "view " << i;
    EXPECT_GT(fit.report.final_sharpness, 0.0);
    EXPECT_EQ(fit.report.losses.size(), 300u);
}

TEST(FitSdf, FittedSphereVolumeMatchesSource) {
    const auto& fit = sphere_fit();
    EXPECT_GE(volume_iou(extract_volume(fit.field, 48), fit.source), 0.7);
}

TEST(FitSdf, EikonalResidualAfterFit) { EXPECT_LE(eikonal_residual(sphere_fit().field, 4000, 9), 0.1); }

TEST(FitSdf, SignChangesEvenlyAlongRays) {
    const auto& field = sphere_fit().field;
    Rng rng(4);
    for (int r = 0; r < 50; ++r) {
        std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()}, off{};
        const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        for (int a = 0; a < 3; ++a) {
            dir[std::size_t(a)] /= n;
            off[std::size_t(a)] = 0.3 * (2 * rng.uniform() - 1);
        }
        std::vector<float> pts;
        for (int k = 0; k <= 400; ++k) {
            const double t = -3.0 + 6.0 * k / 400;
            for (int a = 0; a < 3; ++a) pts.push_back(float(off[std::size_t(a)] + t * dir[std::size_t(a)]));
        }
        const auto f = field.values(pts);
        EXPECT_GT(f.front(), 0.0f);
        EXPECT_GT(f.back(), 0.0f);
        int changes = 0;
        for (std::size_t i = 1; i < f.size(); ++i) changes += (f[i - 1] < 0) != (f[i] < 0);
        EXPECT_EQ(changes % 2, 0);
    }
}

TEST(FitSdf, ZeroIterationsIsSphereInitialisation) {
    auto source = voxelize(generate_sh_shape(1, 0, 0), 32);
    auto views = render_silhouettes(source, sample_pose_ring(8, kRingElevation), 32);
    SdfFitOptions opts;
    opts.iterations = 0;
    SdfFitReport report;
    auto field = fit_sdf(views, opts, &report);
    EXPECT_TRUE(report.losses.empty());
    EXPECT_NEAR(report.final_sharpness, opts.field.init_sharpness, 1e-4);
    EXPECT_GE(mean_view_iou(render_field(field, views.poses, 32), views), 0.5);
    // Origin inside, far corner outside.
    const auto f = field.values({0, 0, 0, 2, 2, 2});
    EXPECT_LT(f[0], 0.0f);
    EXPECT_GT(f[1], 0.0f);
}

TEST(FitSdf, Preconditions) {
    auto source = voxelize(generate_sh_shape(1, 0, 0), 16);
    auto three = render_silhouettes(source, sample_pose_ring(3, 0.0), 16);
    EXPECT_THROW(fit_sdf(three, {}), ContractViolation);
    ViewSet empty;
    for (const auto& p : sample_pose_ring(4, 0.0)) {
        empty.views.emplace_back(16, 16);
        empty.poses.push_back(p);
    }
    EXPECT_THROW(fit_sdf(empty, {}), InputError);
}

TEST(FitSdf, DivergenceIsReported) {
    auto source = voxelize(generate_sh_shape(1, 0, 0), 16);
    auto views = render_silhouettes(source, sample_pose_ring(4, 0.0), 16);
    SdfFitOptions opts;
    opts.iterations = 3;
    opts.rays_per_iteration = 8;
    opts.samples_per_ray = 8;
    opts.learning_rate = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(fit_sdf(views, opts), OptimizationFailure);
}

TEST(ExtractVolume, AnalyticSphereVolume) {
    auto vol = analytic_sphere(64, 0.5);
    const double frac = double(std::count(vol.voxels.begin(), vol.voxels.end(), 1)) / double(vol.voxels.size());
    // Radius 0.5 world units is 0.5 * 0.45 of the grid side.
    const double expected = 4.0 / 3.0 * std::numbers::pi * std::pow(0.5 * kGridFill, 3);
    EXPECT_NEAR(frac, expected, 0.05 * expected);
}

TEST(ExtractVolume, EmptyFieldFails) {
    EXPECT_THROW(extract_volume([](double, double, double) { return 1.0; }, 16), ReconstructionFailure);
}

TEST(ExtractVolume, KeepsLargestComponent) {
    auto vol = extract_volume(
        [](double x, double y, double z) {
            const double big = std::sqrt((x - 0.6) * (x - 0.6) + y * y + z * z) - 0.4;
            const double small = std::sqrt((x + 0.7) * (x + 0.7) + y * y + z * z) - 0.2;
            return std::min(big, small);
        },
        40);
    EXPECT_EQ(count_components(vol), 1);
    const int big_centre = int(0.6 * kGridFill * 40 + 20);
    EXPECT_EQ(vol.at(big_centre, 20, 20), 1);
}

TEST(SliceVolume, SingleSliceIsEquator) {
    auto vol = analytic_sphere(64, 0.6);
    auto stack = slice_volume(vol, 1, 64, 64);
    ASSERT_EQ(stack.slices.size(), 1u);
    // Largest plane area among all z-planes.
    std::size_t best = 0;
    for (int z = 0; z < 64; ++z) {
        std::size_t a = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) a += vol.at(x, y, z);
        best = std::max(best, a);
    }
    EXPECT_EQ(foreground_area(stack.slices[0]), best);
}

TEST(SliceVolume, FullResolutionIsIdentity) {
    // A z-aligned cylinder spans every plane, so S = D reproduces the grid.
    const int d = 24;
    VoxelVolume vol(d, d, d);
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) vol.at(x, y, z) = std::hypot(x - 11.5, y - 9.5) < 3.0 + z % 5;
    auto stack = slice_volume(vol, d, d, d);
    for (int z = 0; z < d; ++z) {
        EXPECT_DOUBLE_EQ(stack.z[std::size_t(z)], z + 0.5);
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) ASSERT_EQ(stack.slices[std::size_t(z)].at(x, y), vol.at(x, y, z));
    }
}

TEST(SliceVolume, SphereSlicesSymmetric) {
    auto stack = slice_volume(analytic_sphere(64, 0.8), 5, 64, 64);
    std::vector<double> area;
    for (const auto& s : stack.slices) area.push_back(double(foreground_area(s)));
    EXPECT_NEAR(area[0], area[4], 0.1 * area[0]);
    EXPECT_NEAR(area[1], area[3], 0.1 * area[1]);
    EXPECT_GT(area[2], area[1]);
    EXPECT_GT(area[1], area[0]);
}

TEST(SliceVolume, PlanesAscendingAndEquallySpaced) {
    auto stack = slice_volume(voxelize(generate_sh_shape(4, 5, 3), 48), 7, 32, 32);
    ASSERT_EQ(stack.z.size(), 7u);
    const double step = stack.z[1] - stack.z[0];
    EXPECT_GT(step, 0.0);
    for (std::size_t i = 1; i < 7; ++i) EXPECT_NEAR(stack.z[i] - stack.z[i - 1], step, 1e-9);
    bool nonempty = false;
    for (const auto& s : stack.slices) {
        EXPECT_EQ(s.width, 32);
        EXPECT_EQ(s.height, 32);
        nonempty |= foreground_area(s) > 0;
    }
    EXPECT_TRUE(nonempty);
}

TEST(SliceVolume, TotalAreaScalesWithSliceCount) {
    auto vol = voxelize(generate_sh_shape(8, 5, 3), 64);
    auto total = [&](int s) {
        double acc = 0.0;
        for (const auto& m : slice_volume(vol, s, 64, 64).slices) acc += double(foreground_area(m));
        return acc;
    };
    const double per_slice = total(8) / 8;
    for (int s : {16, 32}) EXPECT_NEAR(total(s) / s, per_slice, 0.1 * per_slice) << s;
}

TEST(SliceVolume, Errors) {
    auto vol = analytic_sphere(16, 0.5);
    EXPECT_THROW(slice_volume(vol, 0, 16, 16), RangeError);
    EXPECT_THROW(slice_volume(VoxelVolume(8, 8, 8), 2, 8, 8), ReconstructionFailure);
}
