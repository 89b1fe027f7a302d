#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "cellsynth/shape_library.hpp"

using namespace cellsynth;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<std::pair<int, int>> boundary(const MaskImage& m) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            if (!m.at(x, y)) continue;
            bool edge = false;
            for (auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}})
                if (!m.contains(x + dx, y + dy) || !m.at(x + dx, y + dy)) edge = true;
            if (edge) out.emplace_back(x, y);
        }
    return out;
}

double hausdorff(const std::vector<std::pair<int, int>>& a, const std::vector<std::pair<int, int>>& b) {
    auto directed = [](const auto& p, const auto& q) {
        double worst = 0.0;
        for (auto [x, y] : p) {
            double best = 1e30;
            for (auto [u, v] : q) best = std::min(best, std::hypot(double(x - u), double(y - v)));
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(directed(a, b), directed(b, a));
}

}  // namespace

TEST(SphericalHarmonics, Orthonormal) {
    // Midpoint quadrature over the sphere.
    const int nt = 120, np = 240;
    const std::vector<std::pair<int, int>> lm{{0, 0}, {1, -1}, {2, 1}, {3, -2}, {3, 3}, {5, 0}};
    for (auto [l1, m1] : lm)
        for (auto [l2, m2] : lm) {
            double acc = 0.0;
            for (int i = 0; i < nt; ++i)
                for (int j = 0; j < np; ++j) {
                    const double th = kPi * (i + 0.5) / nt, ph = 2 * kPi * (j + 0.5) / np;
                    acc += real_spherical_harmonic(l1, m1, th, ph) * real_spherical_harmonic(l2, m2, th, ph) *
                           std::sin(th) * (kPi / nt) * (2 * kPi / np);
                }
            EXPECT_NEAR(acc, (l1 == l2 && m1 == m2) ? 1.0 : 0.0, 2e-3) << l1 << "," << m1 << " " << l2 << "," << m2;
        }
}

TEST(SphericalHarmonicShape, CoefficientCountByEnumeration) {
    for (int L = 0; L <= 6; ++L)
        for (int M = 0; M <= 6; ++M) {
            std::size_t n = 0;
            for (int l = 0; l <= L; ++l)
                for (int m = -l; m <= l; ++m)
                    if (std::abs(m) <= M) ++n;
            EXPECT_EQ(SphericalHarmonicShape::coefficient_count(L, M), n);
        }
    EXPECT_EQ(generate_sh_shape(1, 5, 3).coefficients.size(), 30u);
}

TEST(SphericalHarmonicShape, ZeroOrderIsUnitSphere) {
    auto s = generate_sh_shape(3, 0, 0);
    Rng rng(1);
    for (int i = 0; i < 50; ++i) EXPECT_NEAR(s.radius(kPi * rng.uniform(), 2 * kPi * rng.uniform()), 1.0, 1e-12);
}

TEST(SphericalHarmonicShape, DeterministicAndNormalised) {
    auto a = generate_sh_shape(42, 5, 3), b = generate_sh_shape(42, 5, 3);
    EXPECT_EQ(a.coefficients, b.coefficients);
    EXPECT_NE(a.coefficients, generate_sh_shape(43, 5, 3).coefficients);
    double mx = 0.0;
    for (int i = 0; i <= 200; ++i)
        for (int j = 0; j < 400; ++j) mx = std::max(mx, a.radius(kPi * i / 200, 2 * kPi * j / 400));
    EXPECT_LE(mx, 1.0 + 1e-9);
    EXPECT_GT(mx, 0.999);
    EXPECT_THROW(generate_sh_shape(1, -1, 0), RangeError);
}

TEST(SphericalHarmonicShape, StarConvexAlongRays) {
    auto s = generate_sh_shape(7, 5, 3);
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const double x = rng.normal(), y = rng.normal(), z = rng.normal();
        const double n = std::sqrt(x * x + y * y + z * z);
        const double r = s.radius_along(x, y, z);
        EXPECT_GE(r, 0.0);
        int crossings = 0;
        bool prev = true;
        for (int k = 1; k <= 300; ++k) {
            const double t = 1.2 * k / 300;
            const bool inside = t <= s.radius_along(t * x / n, t * y / n, t * z / n);
            if (inside != prev) ++crossings;
            prev = inside;
        }
        EXPECT_LE(crossings, 1);
    }
}

TEST(Voxelize, SphereVolumeFraction) {
    auto v = voxelize(generate_sh_shape(1, 0, 0), 64);
    const double frac = double(std::count(v.voxels.begin(), v.voxels.end(), 1)) / double(v.voxels.size());
    const double expected = 4.0 / 3.0 * kPi * std::pow(kGridFill, 3);
    EXPECT_NEAR(frac, expected, 0.05 * expected);
}

TEST(Voxelize, SmallGridAndDeterminism) {
    auto small = voxelize(generate_sh_shape(1, 0, 0), 8);
    EXPECT_EQ(count_components(small), 1);
    auto s = generate_sh_shape(5, 5, 3);
    EXPECT_EQ(voxelize(s, 32), voxelize(s, 32));
    EXPECT_THROW(voxelize(s, 7), RangeError);
}

TEST(Render, SphereIsAnalyticDisc) {
    auto v = voxelize(generate_sh_shape(1, 0, 0), 64);
    Rng rng(3);
    std::vector<CameraPose> poses{{0, 0, 2}, {1.0, 0.5, 2}, {2.0, -1.2, 2}, {0.3, kPi / 2, 2}};
    auto views = render_silhouettes(v, poses, 64);
    const MaskImage analytic = [] {
        MaskImage m(64, 64);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) m.at(x, y) = std::hypot(x + 0.5 - 32, y + 0.5 - 32) <= kGridFill * 64;
        return m;
    }();
    std::vector<double> areas;
    for (const auto& view : views.views) {
        EXPECT_LE(hausdorff(boundary(view), boundary(analytic)), 2.0);
        areas.push_back(double(foreground_area(view)));
    }
    const auto [lo, hi] = std::minmax_element(areas.begin(), areas.end());
    EXPECT_LE((*hi - *lo) / *hi, 0.02);
}

TEST(Render, AntipodalViewsAreMirrored) {
    auto v = voxelize(generate_sh_shape(11, 5, 3), 48);
    for (auto [az, el] : {std::pair{0.4, 0.3}, {2.0, -0.7}, {5.1, 0.0}}) {
        auto views = render_silhouettes(v, {{az, el, 2}, {az + kPi, -el, 2}}, 48);
        const auto& a = views.views[0];
        const auto& b = views.views[1];
        int mismatches = 0;
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 48; ++x) mismatches += a.at(x, y) != b.at(47 - x, y);
        EXPECT_EQ(mismatches, 0);
    }
}

TEST(Render, MatchesAxisProjection) {
    // Camera on +x at elevation 0: right = +y, up = +z, so the image is the x-projection with z flipped.
    const int d = 32;
    auto v = voxelize(generate_sh_shape(9, 5, 3), d);
    auto img = render_silhouettes(v, {{0, 0, 2}}, d).views[0];
    for (int py = 0; py < d; ++py)
        for (int px = 0; px < d; ++px) {
            std::uint8_t any = 0;
            for (int x = 0; x < d; ++x) any |= v.at(x, px, d - 1 - py);
            EXPECT_EQ(img.at(px, py), any) << px << "," << py;
        }
}

TEST(Render, RejectsEmptyPoseList) {
    auto v = voxelize(generate_sh_shape(1, 0, 0), 8);
    EXPECT_THROW(render_silhouettes(v, {}, 16), ContractViolation);
}

TEST(PoseRing, Layout) {
    auto ring = sample_pose_ring(16, 0.5);
    for (int i = 0; i < 16; ++i) {
        EXPECT_NEAR(ring[i].azimuth, 2 * kPi * i / 16, 1e-12);
        EXPECT_EQ(ring[i].elevation, 0.5);
    }
    auto one = sample_pose_ring(1, 0.2);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].azimuth, 0.0);
    auto four = sample_pose_ring(4, 0.0);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(four[i].azimuth, kPi / 2 * i, 1e-12);
    EXPECT_THROW(sample_pose_ring(0, 0.0), RangeError);
}

TEST(ShapeCorpus, RecordRoundTrip) {
    ShapeCorpusOptions opts;
    opts.views = 4;
    opts.view_size = 24;
    opts.voxel_resolution = 24;
    auto rec = make_shape_record(17, opts);
    const auto dir = std::filesystem::temp_directory_path() / "cellsynth_shape_rec";
    std::filesystem::remove_all(dir);
    save_shape_record(dir / "shape_0000", rec);
    auto corpus = load_shape_corpus(dir);
    ASSERT_EQ(corpus.size(), 1u);
    EXPECT_EQ(corpus[0].ring.views, rec.ring.views);
    EXPECT_EQ(corpus[0].condition, rec.condition);
    EXPECT_EQ(corpus[0].shape.coefficients, rec.shape.coefficients);
    EXPECT_DOUBLE_EQ(corpus[0].ring.poses[2].azimuth, rec.ring.poses[2].azimuth);
    std::filesystem::remove_all(dir);
}
