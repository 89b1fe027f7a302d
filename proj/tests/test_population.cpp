#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cellsynth/population.hpp"
#include "cellsynth/toy.hpp"

using namespace cellsynth;

namespace {

std::vector<CellSample> toy_cells(int count, std::uint64_t seed) {
    std::vector<CellSample> out;
    for (auto& p : toy::cell_pairs(count, 32, seed)) {
        CellSample c;
        c.texture.slices.push_back(p.image);
        c.mask.slices.push_back(p.mask);
        c.mask.z.push_back(0.5);
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<std::pair<int, int>> pixels_of(const LabelMap& m, int id) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y, 0) == id) out.emplace_back(x, y);
    return out;
}

std::array<double, 2> centroid(const std::vector<std::pair<int, int>>& px) {
    double cx = 0, cy = 0;
    for (auto [x, y] : px) {
        cx += x;
        cy += y;
    }
    return {cx / double(px.size()), cy / double(px.size())};
}

double mean_nn_centroid_distance(const LabelMap& m, int count) {
    std::vector<std::array<double, 2>> c;
    for (int id = 1; id <= count; ++id) c.push_back(centroid(pixels_of(m, id)));
    double acc = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        double best = 1e30;
        for (std::size_t j = 0; j < c.size(); ++j)
            if (i != j) best = std::min(best, std::hypot(c[i][0] - c[j][0], c[i][1] - c[j][1]));
        acc += best;
    }
    return acc / double(c.size());
}

}  // namespace

TEST(CompositeCell, PasteAndReadBack) {
    auto cells = toy_cells(2, 1);
    LabeledFrame frame{Volume<float>(64, 64, 1, 0.25f), LabelMap(64, 64, 1)};
    ASSERT_TRUE(composite_cell(frame, cells[0], {10, 20, 0}, 1));
    const auto& m = cells[0].mask.slices[0];
    const auto& t = cells[0].texture.slices[0];
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const int lx = x - 10, ly = y - 20;
            const bool inside = m.contains(lx, ly) && m.at(lx, ly);
            EXPECT_EQ(frame.raw.at(x, y, 0), inside ? t.at(lx, ly) : 0.25f);
            EXPECT_EQ(frame.labels.at(x, y, 0), inside ? 1 : 0);
        }
}

TEST(CompositeCell, OverlapIsRejectedWithoutChanges) {
    auto cells = toy_cells(2, 2);
    LabeledFrame frame{Volume<float>(64, 64, 1, 0.0f), LabelMap(64, 64, 1)};
    ASSERT_TRUE(composite_cell(frame, cells[0], {16, 16, 0}, 1));
    const auto before = frame;
    EXPECT_FALSE(composite_cell(frame, cells[1], {16, 16, 0}, 2));
    EXPECT_EQ(frame.raw, before.raw);
    EXPECT_EQ(frame.labels, before.labels);
    EXPECT_FALSE(composite_cell(frame, cells[1], {60, 60, 0}, 2));  // leaves the canvas
    EXPECT_EQ(frame.labels, before.labels);
}

TEST(SynthesizePopulation, ZeroAndOneCell) {
    PlacementPolicy policy;
    policy.target_count = 0;
    auto empty = synthesize_population({}, {64, 64, 1, 0.0f, 0.0}, policy, 1);
    EXPECT_TRUE(std::all_of(empty.raw.voxels.begin(), empty.raw.voxels.end(), [](float v) { return v == 0.0f; }));
    EXPECT_TRUE(std::all_of(empty.labels.voxels.begin(), empty.labels.voxels.end(), [](auto v) { return v == 0; }));
    policy.target_count = 1;
    auto one = synthesize_population(toy_cells(1, 3), {64, 64, 1, 0.0f, 0.0}, policy, 2);
    std::set<int> ids(one.labels.voxels.begin(), one.labels.voxels.end());
    EXPECT_EQ(ids, (std::set<int>{0, 1}));
    EXPECT_EQ(one.placed, 1);
}

TEST(SynthesizePopulation, FirstCellPositionIsUniform) {
    // Centroid x over many seeds should spread across the canvas.
    PlacementPolicy policy;
    policy.target_count = 1;
    auto cells = toy_cells(1, 4);
    double lo = 1e9, hi = -1e9, mean = 0.0;
    const int trials = 200;
    for (int s = 0; s < trials; ++s) {
        auto f = synthesize_population(cells, {128, 128, 1, 0.0f, 0.0}, policy, std::uint64_t(s));
        const double cx = centroid(pixels_of(f.labels, 1))[0];
        lo = std::min(lo, cx);
        hi = std::max(hi, cx);
        mean += cx / trials;
    }
    EXPECT_LT(lo, 30.0);
    EXPECT_GT(hi, 98.0);
    EXPECT_NEAR(mean, 64.0, 8.0);
}

TEST(SynthesizePopulation, FullClusteringInvariants) {
    PlacementPolicy policy;
    policy.clustering_probability = 1.0;
    policy.target_count = 10;
    const auto cells = toy_cells(10, 5);
    for (int trial = 0; trial < 100; ++trial) {
        auto f = synthesize_population(cells, {512, 512, 1, 0.0f, 0.0}, policy, std::uint64_t(1000 + trial));
        ASSERT_EQ(f.placed, 10);
        // Every placed mask is intact, so no pixel of one cell was claimed by another.
        for (int id = 1; id <= 10; ++id)
            EXPECT_EQ(pixels_of(f.labels, id).size(), foreground_area(cells[std::size_t(id - 1)].mask.slices[0]));
        std::vector<std::pair<int, int>> prior = pixels_of(f.labels, 1);
        for (int id = 2; id <= 10; ++id) {
            const auto cur = pixels_of(f.labels, id);
            double best = 1e30;
            for (auto [x, y] : cur)
                for (auto [u, v] : prior) best = std::min(best, std::hypot(double(x - u), double(y - v)));
            EXPECT_LE(best, double(policy.neighborhood_radius)) << "trial " << trial << " cell " << id;
            prior.insert(prior.end(), cur.begin(), cur.end());
        }
    }
}

TEST(SynthesizePopulation, ClusteringIsMonotone) {
    const auto cells = toy_cells(10, 6);
    std::vector<double> means;
    for (double p : {0.0, 0.5, 1.0}) {
        PlacementPolicy policy;
        policy.clustering_probability = p;
        policy.target_count = 10;
        double acc = 0.0;
        for (int t = 0; t < 100; ++t)
            acc += mean_nn_centroid_distance(
                synthesize_population(cells, {512, 512, 1, 0.0f, 0.0}, policy, std::uint64_t(t)).labels, 10);
        means.push_back(acc / 100);
    }
    EXPECT_GE(means[0], means[1]);
    EXPECT_GE(means[1], means[2]);
}

TEST(SynthesizePopulation, DeterministicPerSeed) {
    const auto cells = toy_cells(5, 7);
    PlacementPolicy policy;
    policy.target_count = 8;
    CanvasSpec canvas{128, 128, 1, 0.1f, 0.02};
    auto a = synthesize_population(cells, canvas, policy, 9);
    auto b = synthesize_population(cells, canvas, policy, 9);
    EXPECT_EQ(a.raw, b.raw);
    EXPECT_EQ(a.labels, b.labels);
    auto c = synthesize_population(cells, canvas, policy, 10);
    EXPECT_NE(a.labels, c.labels);
}

TEST(SynthesizePopulation, SkipsCellsThatNeverFitAndKeepsIdsConsecutive) {
    const auto cells = toy_cells(3, 8);
    PlacementPolicy policy;
    policy.target_count = 40;
    policy.max_attempts = 5;
    auto f = synthesize_population(cells, {48, 48, 1, 0.0f, 0.0}, policy, 3);
    EXPECT_GT(f.skipped, 0);
    EXPECT_EQ(f.placed + f.skipped, 40);
    std::set<int> ids(f.labels.voxels.begin(), f.labels.voxels.end());
    ids.erase(0);
    ASSERT_EQ(int(ids.size()), f.placed);
    EXPECT_EQ(*ids.rbegin(), f.placed);
}

TEST(SynthesizePopulation, ThreeDimensionalCellsShareOneOffset) {
    // A 3-slice cell in a 5-slice canvas: slices stay aligned in xy and contiguous in z.
    CellSample cell;
    for (int s = 0; s < 3; ++s) {
        cell.mask.slices.push_back(toy::disc_mask(16, 3 + s));
        cell.texture.slices.push_back(GrayImage(16, 16, 0.5f + 0.1f * float(s)));
        cell.mask.z.push_back(s + 0.5);
    }
    PlacementPolicy policy;
    policy.target_count = 6;
    auto f = synthesize_population({cell}, {96, 96, 5, 0.0f, 0.0}, policy, 4);
    for (int id = 1; id <= f.placed; ++id) {
        std::set<int> zs;
        std::array<double, 2> c0{};
        for (int z = 0; z < 5; ++z) {
            std::vector<std::pair<int, int>> px;
            for (int y = 0; y < 96; ++y)
                for (int x = 0; x < 96; ++x)
                    if (f.labels.at(x, y, z) == id) px.emplace_back(x, y);
            if (px.empty()) continue;
            const auto c = centroid(px);
            if (zs.empty()) c0 = c;
            EXPECT_NEAR(c[0], c0[0], 1e-9);
            EXPECT_NEAR(c[1], c0[1], 1e-9);
            zs.insert(z);
        }
        ASSERT_EQ(zs.size(), 3u);
        EXPECT_EQ(*zs.rbegin() - *zs.begin(), 2);
    }
    EXPECT_THROW(synthesize_population({cell}, {96, 96, 2, 0.0f, 0.0}, policy, 4), InputError);
}

TEST(SynthesizePopulation, Errors) {
    PlacementPolicy policy;
    policy.target_count = 1;
    EXPECT_THROW(synthesize_population(toy_cells(1, 9), {16, 16, 1, 0.0f, 0.0}, policy, 1), InputError);
    policy.clustering_probability = 1.5;
    EXPECT_THROW(synthesize_population(toy_cells(1, 9), {64, 64, 1, 0.0f, 0.0}, policy, 1), RangeError);
    policy.clustering_probability = 0.5;
    EXPECT_THROW(synthesize_population({}, {64, 64, 1, 0.0f, 0.0}, policy, 1), InputError);
}

TEST(DistanceTransform, MatchesBruteForce) {
    Rng rng(11);
    MaskImage m(37, 23);
    for (auto& v : m.pixels) v = rng.uniform() < 0.03 ? 1 : 0;
    m.at(5, 5) = 1;
    const auto d = distance_to_foreground(m);
    for (int y = 0; y < 23; ++y)
        for (int x = 0; x < 37; ++x) {
            double best = 1e30;
            for (int v = 0; v < 23; ++v)
                for (int u = 0; u < 37; ++u)
                    if (m.at(u, v)) best = std::min(best, std::hypot(double(x - u), double(y - v)));
            EXPECT_NEAR(d.at(x, y), best, 1e-9);
        }
}

TEST(Background, MedianOfUnmaskedPixels) {
    TexturePair a{GrayImage(2, 2), MaskImage(2, 2)};
    a.image.pixels = {0.1f, 0.2f, 0.9f, 0.3f};
    a.mask.pixels = {0, 0, 1, 0};
    EXPECT_FLOAT_EQ(estimate_background({a}), 0.2f);
    a.mask.pixels = {1, 1, 1, 1};
    EXPECT_THROW(estimate_background({a}), InputError);
}
