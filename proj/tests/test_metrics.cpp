#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cellsynth/metrics.hpp"

using namespace cellsynth;

namespace {

// Enumerates every (gt, pred) instance pair and counts pixels from scratch.
double brute_force_seg(const LabelMap& pred, const LabelMap& gt) {
    std::set<int> gt_ids, pred_ids;
    for (auto v : gt.voxels)
        if (v) gt_ids.insert(v);
    for (auto v : pred.voxels)
        if (v) pred_ids.insert(v);
    double total = 0.0;
    for (int g : gt_ids) {
        double score = 0.0;
        for (int p : pred_ids) {
            int inter = 0, uni = 0, r = 0;
            for (std::size_t i = 0; i < gt.voxels.size(); ++i) {
                const bool in_g = gt.voxels[i] == g, in_p = pred.voxels[i] == p;
                inter += in_g && in_p;
                uni += in_g || in_p;
                r += in_g;
            }
            if (inter * 2 > r) score = double(inter) / uni;
        }
        total += score;
    }
    return total / double(gt_ids.size());
}

LabelMap random_labels(Rng& rng, int size, int max_id) {
    // Random rectangles painted in order give overlapping, fragmented instances.
    LabelMap m(size, size, 1);
    const int rects = rng.uniform_int(1, 12);
    for (int k = 0; k < rects; ++k) {
        const int id = rng.uniform_int(0, max_id);
        const int x0 = rng.uniform_int(0, size - 1), y0 = rng.uniform_int(0, size - 1);
        const int w = rng.uniform_int(1, 14), h = rng.uniform_int(1, 14);
        for (int y = y0; y < std::min(size, y0 + h); ++y)
            for (int x = x0; x < std::min(size, x0 + w); ++x) m.at(x, y, 0) = std::uint16_t(id);
    }
    return m;
}

FeatureSet gaussian_set(Rng& rng, int n, int d, double shift) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n), std::vector<double>(std::size_t(d)));
    for (auto& r : rows)
        for (auto& v : r) v = rng.normal() + shift;
    return make_feature_set(rows);
}

}  // namespace

TEST(SegScore, PerfectAndEmptyPrediction) {
    Rng rng(1);
    LabelMap gt = random_labels(rng, 32, 6);
    gt.at(0, 0, 0) = 7;
    EXPECT_DOUBLE_EQ(seg_score(gt, gt), 1.0);
    EXPECT_DOUBLE_EQ(seg_score(LabelMap(32, 32, 1), gt), 0.0);
}

TEST(SegScore, MatchesBruteForceOracle) {
    Rng rng(2);
    int nonzero = 0;
    for (int c = 0; c < 100; ++c) {
        LabelMap gt = random_labels(rng, 32, 6);
        LabelMap pred = random_labels(rng, 32, 6);
        if (std::all_of(gt.voxels.begin(), gt.voxels.end(), [](auto v) { return v == 0; })) gt.at(3, 3, 0) = 1;
        // Mix in near-copies so matches actually occur.
        if (c % 2 == 0)
            for (std::size_t i = 0; i < pred.voxels.size(); ++i)
                if (rng.uniform() < 0.8) pred.voxels[i] = gt.voxels[i];
        const double fast = seg_score(pred, gt);
        EXPECT_EQ(fast, brute_force_seg(pred, gt)) << "case " << c;
        nonzero += fast > 0.0;
    }
    EXPECT_GT(nonzero, 40);
}

TEST(SegScore, InvariantToIdPermutation) {
    Rng rng(3);
    for (int c = 0; c < 20; ++c) {
        LabelMap gt = random_labels(rng, 32, 5), pred = gt;
        for (auto& v : pred.voxels)
            if (rng.uniform() < 0.3) v = std::uint16_t(rng.uniform_int(0, 5));
        if (std::all_of(gt.voxels.begin(), gt.voxels.end(), [](auto v) { return v == 0; })) continue;
        const std::vector<std::uint16_t> perm{0, 4, 1, 5, 2, 3};
        LabelMap gp = gt, pp = pred;
        for (auto& v : gp.voxels) v = perm[v];
        for (auto& v : pp.voxels) v = perm[v];
        EXPECT_DOUBLE_EQ(seg_score(pp, gp), seg_score(pred, gt));
    }
}

TEST(SegScore, ThreeDimensionalAndErrors) {
    LabelMap gt(4, 4, 3), pred(4, 4, 3);
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) gt.at(x, y, z) = 1;
    pred = gt;
    pred.at(0, 0, 0) = 0;  // 11 of 12 voxels
    EXPECT_DOUBLE_EQ(seg_score(pred, gt), 11.0 / 12.0);
    EXPECT_THROW(seg_score(LabelMap(4, 4, 2), gt), InputError);
    EXPECT_THROW(seg_score(gt, LabelMap(4, 4, 3)), UndefinedScoreError);
}

TEST(FrechetDistance, IdenticalSetsAreZero) {
    Rng rng(4);
    auto a = gaussian_set(rng, 500, 8, 0.3);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
}

TEST(FrechetDistance, IsotropicGaussiansMatchAnalytic) {
    Rng rng(5);
    auto a = gaussian_set(rng, 10000, 8, 0.0), b = gaussian_set(rng, 10000, 8, 1.0);
    EXPECT_NEAR(frechet_distance(a, b), 8.0, 0.02 * 8.0);
}

TEST(FrechetDistance, DiagonalCovarianceClosedForm) {
    // Exact statistics set directly.
    const int d = 5;
    FeatureSet a, b;
    a.d = b.d = d;
    a.n = b.n = 2;
    a.mean.assign(d, 0.5);
    b.mean.assign(d, 0.5);
    a.covariance.assign(std::size_t(d * d), 0.0);
    b.covariance.assign(std::size_t(d * d), 0.0);
    double expected = 0.0;
    for (int i = 0; i < d; ++i) {
        a.covariance[std::size_t(i * d + i)] = i + 1;
        b.covariance[std::size_t(i * d + i)] = i + 2;
        expected += std::pow(std::sqrt(i + 1.0) - std::sqrt(i + 2.0), 2);
    }
    EXPECT_NEAR(frechet_distance(a, b), expected, 1e-6);
}

TEST(FrechetDistance, SymmetricAndNonNegative) {
    Rng rng(6);
    for (int k = 0; k < 5; ++k) {
        auto a = gaussian_set(rng, 50, 6, 0.1 * k), b = gaussian_set(rng, 40, 6, -0.2);
        const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
        EXPECT_NEAR(ab, ba, 1e-8);
        EXPECT_GE(ab, 0.0);
    }
}

TEST(FrechetDistance, Errors) {
    Rng rng(7);
    EXPECT_THROW(frechet_distance(gaussian_set(rng, 5, 3, 0), gaussian_set(rng, 5, 4, 0)), InputError);
    EXPECT_THROW(make_feature_set({{1.0, std::nan("")}, {1.0, 2.0}}), InputError);
    EXPECT_THROW(make_feature_set({{1.0}}), InputError);
}

TEST(ExtractFeatures, ConstantAndIdentityExtractors) {
    std::vector<GrayImage> set1, set2;
    Rng rng(8);
    for (int i = 0; i < 10; ++i) {
        GrayImage img(16, 16);
        for (auto& v : img.pixels) v = float(rng.uniform());
        set1.push_back(img);
    }
    for (int i = 0; i < 7; ++i) set2.push_back(GrayImage(16, 16, float(i) / 7));
    FeatureExtractor constant = [](const GrayImage&) { return std::vector<double>{1.0, 2.0, 3.0}; };
    auto c1 = extract_features(set1, constant), c2 = extract_features(set2, constant);
    for (double v : c1.covariance) EXPECT_EQ(v, 0.0);
    EXPECT_NEAR(frechet_distance(c1, c2), 0.0, 1e-12);
    FeatureExtractor identity = [](const GrayImage& g) { return std::vector<double>(g.pixels.begin(), g.pixels.end()); };
    auto i1 = extract_features(set1, identity);
    EXPECT_NEAR(frechet_distance(i1, extract_features(set1, identity)), 0.0, 1e-8);
    EXPECT_THROW(extract_features({}, constant), InputError);
    EXPECT_THROW(extract_features({set1[0]}, constant), InputError);
}

TEST(ExtractFeatures, DownsampleAveragesBlocks) {
    GrayImage img(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) img.at(x, y) = float(x / 2 + 8 * (y / 2));
    const auto f = downsample_extractor(8)(img);
    ASSERT_EQ(f.size(), 64u);
    for (int i = 0; i < 64; ++i) EXPECT_DOUBLE_EQ(f[std::size_t(i)], double(i));
}

TEST(MetricReports, RecordsAndTable) {
    std::vector<MetricRecord> recs{{"SEG", "toy-2d", 0.75}, {"FID", "toy-2d", 1.5}, {"SEG", "toy-3d", 0.5}};
    EXPECT_EQ(format_records(recs), "SEG\ttoy-2d\t0.75\nFID\ttoy-2d\t1.5\nSEG\ttoy-3d\t0.5\n");
    const auto table = format_table(recs);
    EXPECT_NE(table.find("toy-3d"), std::string::npos);
    EXPECT_NE(table.find("0.7500"), std::string::npos);
    EXPECT_NE(table.find("-"), std::string::npos);
}
