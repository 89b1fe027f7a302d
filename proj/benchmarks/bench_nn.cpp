#include <benchmark/benchmark.h>

#include "cellsynth/nn.hpp"
#include "cellsynth/unet.hpp"

using namespace cellsynth;
using namespace cellsynth::nn;

static void BM_UNetTrainStep(benchmark::State& state) {
    const int side = int(state.range(0));
    const int base = int(state.range(1));
    const int batch = 8;
    Rng rng(1);
    ParameterStore ps;
    UNetConfig cfg;
    cfg.base_channels = base;
    UNet net(ps, "u", cfg, rng);
    Adam opt(ps.params(), {});
    const auto x = rng.normal_vector(std::size_t(batch) * side * side);
    const auto target = rng.normal_vector(x.size());
    std::vector<int> t(batch, 10);
    for (auto _ : state) {
        Var y = net.forward({Var::constant({batch, 1, side, side}, x), t});
        Var loss = mse(y, target);
        loss.backward();
        opt.step();
        benchmark::DoNotOptimize(loss.item());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_UNetTrainStep)->Args({32, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);

static void BM_UNetInference(benchmark::State& state) {
    const int side = int(state.range(0));
    Rng rng(2);
    ParameterStore ps;
    UNetConfig cfg;
    cfg.base_channels = 16;
    UNet net(ps, "u", cfg, rng);
    const auto x = rng.normal_vector(std::size_t(side) * side);
    for (auto _ : state) {
        NoGradGuard ng;
        Var y = net.forward({Var::constant({1, 1, side, side}, x), {10}});
        benchmark::DoNotOptimize(y.value().data());
    }
}
BENCHMARK(BM_UNetInference)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);
static void BM_Conv3x3(benchmark::State& state) {
    const int c = int(state.range(0)), side = int(state.range(1)), batch = 8;
    Rng rng(3);
    Var x = Var::parameter({batch, c, side, side}, rng.normal_vector(std::size_t(batch) * c * side * side));
    Var w = Var::parameter({c, c, 3, 3}, rng.normal_vector(std::size_t(c) * c * 9));
    Var b = Var::parameter({c}, std::vector<float>(std::size_t(c), 0.0f));
    for (auto _ : state) {
        Var loss = sum(conv2d(x, w, b));
        loss.backward();
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_Conv3x3)->Args({8, 32})->Args({16, 16})->Args({32, 8})->Unit(benchmark::kMillisecond);

static void BM_GroupNormSilu(benchmark::State& state) {
    const int c = 8, side = 32, batch = 8;
    Rng rng(4);
    Var x = Var::parameter({batch, c, side, side}, rng.normal_vector(std::size_t(batch) * c * side * side));
    Var g = Var::parameter({c}, std::vector<float>(c, 1.0f)), b = Var::parameter({c}, std::vector<float>(c, 0.0f));
    for (auto _ : state) {
        Var loss = sum(silu(group_norm(x, g, b, 4)));
        loss.backward();
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_GroupNormSilu)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
