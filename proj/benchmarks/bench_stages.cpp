#include <benchmark/benchmark.h>

#include "cellsynth/metrics.hpp"
#include "cellsynth/population.hpp"
#include "cellsynth/shape_library.hpp"
#include "cellsynth/surface_recon.hpp"
#include "cellsynth/texture_diffusion.hpp"
#include "cellsynth/toy.hpp"

using namespace cellsynth;

static void BM_CorrelatedLatents(benchmark::State& state) {
    const int slices = int(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(make_correlated_latents(slices, 0.7, {1, 1, 128, 128}, 3));
}
BENCHMARK(BM_CorrelatedLatents)->Arg(1)->Arg(16);

static void BM_SegScore(benchmark::State& state) {
    const int side = int(state.range(0));
    Rng rng(1);
    LabelMap gt(side, side, 1), pred(side, side, 1);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            gt.at(x, y, 0) = std::uint16_t(1 + (x / 16) + (y / 16) * (side / 16));
            pred.at(x, y, 0) = rng.uniform() < 0.9 ? gt.at(x, y, 0) : 0;
        }
    for (auto _ : state) benchmark::DoNotOptimize(seg_score(pred, gt));
}
BENCHMARK(BM_SegScore)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

static void BM_FrechetDistance(benchmark::State& state) {
    const int d = int(state.range(0));
    Rng rng(2);
    std::vector<std::vector<double>> a(1000, std::vector<double>(std::size_t(d))), b = a;
    for (auto& r : a)
        for (auto& v : r) v = rng.normal();
    for (auto& r : b)
        for (auto& v : r) v = rng.normal() + 0.5;
    const auto fa = make_feature_set(a), fb = make_feature_set(b);
    for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(fa, fb));
}
BENCHMARK(BM_FrechetDistance)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

static void BM_SynthesizePopulation(benchmark::State& state) {
    std::vector<CellSample> cells;
    for (auto& p : toy::cell_pairs(20, 32, 4)) {
        CellSample c;
        c.texture.slices.push_back(p.image);
        c.mask.slices.push_back(p.mask);
        c.mask.z.push_back(0.5);
        cells.push_back(std::move(c));
    }
    PlacementPolicy policy;
    policy.clustering_probability = 0.5;
    policy.target_count = int(state.range(0));
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(synthesize_population(cells, {512, 512, 1, 0.1f, 0.0}, policy, ++seed));
}
BENCHMARK(BM_SynthesizePopulation)->Arg(10)->Arg(40)->Unit(benchmark::kMillisecond);

static void BM_VoxelizeAndRender(benchmark::State& state) {
    const int d = int(state.range(0));
    const auto shape = generate_sh_shape(1, 5, 3);
    const auto poses = sample_pose_ring(16, 0.5);
    for (auto _ : state) benchmark::DoNotOptimize(render_silhouettes(voxelize(shape, d), poses, d));
}
BENCHMARK(BM_VoxelizeAndRender)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_SdfFitIterations(benchmark::State& state) {
    const auto volume = voxelize(generate_sh_shape(1, 5, 3), 64);
    const auto poses = sample_pose_ring(16, 0.5);
    const auto views = render_silhouettes(volume, poses, 64);
    SdfFitOptions opts;
    opts.iterations = 20;
    for (auto _ : state) benchmark::DoNotOptimize(fit_sdf(views, opts));
    state.SetItemsProcessed(state.iterations() * opts.iterations);
}
BENCHMARK(BM_SdfFitIterations)->Unit(benchmark::kMillisecond);
