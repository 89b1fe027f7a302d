#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>

#include "cellsynth/texture_diffusion.hpp"
#include "cellsynth/toy.hpp"

using namespace cellsynth;

namespace {

TextureModelConfig tiny_config(int size = 16) {
    TextureModelConfig cfg;
    cfg.image_size = size;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_mults = {1, 2};
    cfg.unet.emb_dim = 16;
    return cfg;
}

void perturb(nn::ParameterStore& ps, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : ps.params())
        for (auto& v : p.mutable_value()) v += 0.05f * float(rng.normal());
}

double variance(const Array& a) {
    double m = 0, s = 0;
    for (float v : a.data) m += v;
    m /= double(a.size());
    for (float v : a.data) s += (v - m) * (v - m);
    return s / double(a.size() - 1);
}

double correlation(const Array& a, const Array& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a.data[i];
        mb += b.data[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double cab = 0, caa = 0, cbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cab += (a.data[i] - ma) * (b.data[i] - mb);
        caa += (a.data[i] - ma) * (a.data[i] - ma);
        cbb += (b.data[i] - mb) * (b.data[i] - mb);
    }
    return cab / std::sqrt(caa * cbb);
}

MaskStack repeated(const MaskImage& m, int s) {
    MaskStack out;
    for (int i = 0; i < s; ++i) {
        out.slices.push_back(m);
        out.z.push_back(i + 0.5);
    }
    return out;
}

SamplerConfig texture_sampler(int steps = 10) {
    SamplerConfig cfg;
    cfg.num_inference_steps = steps;
    cfg.guidance_scale = 5.0;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST(CorrelatedLatents, ZeroRhoIsUniqueNoise) {
    auto set = make_correlated_latents(3, 0.0, {1, 1, 8, 8}, 1);
    ASSERT_EQ(set.combined.size(), 3u);
    for (int s = 0; s < 3; ++s) {
        EXPECT_EQ(set.combined[std::size_t(s)].data, set.unique[std::size_t(s)].data);
        EXPECT_EQ(set.unique[std::size_t(s)].data, unique_latent(s, {1, 1, 8, 8}, 1).data);
    }
}

TEST(CorrelatedLatents, CombinationFormula) {
    const double rho = 1.7;
    auto set = make_correlated_latents(2, rho, {50}, 2);
    for (int s = 0; s < 2; ++s)
        for (int i = 0; i < 50; ++i) {
            const double expected = rho / std::sqrt(1 + rho * rho) * set.common.data[std::size_t(i)] +
                                    1 / std::sqrt(1 + rho * rho) * set.unique[std::size_t(s)].data[std::size_t(i)];
            EXPECT_NEAR(set.combined[std::size_t(s)].data[std::size_t(i)], expected, 1e-6);
        }
}

TEST(CorrelatedLatents, UnitVarianceForAnyRho) {
    for (double rho : {0.0, 0.3, 0.7, 4.0, 100.0}) {
        auto set = make_correlated_latents(3, rho, {10000}, 3);
        for (const auto& c : set.combined) {
            const double v = variance(c);
            EXPECT_GE(v, 0.95) << rho;
            EXPECT_LE(v, 1.05) << rho;
        }
    }
}

TEST(CorrelatedLatents, InterSliceCorrelationMatchesAnalytic) {
    const auto t0 = std::chrono::steady_clock::now();
    const double rho = 0.7;
    for (std::uint64_t seed : {4u, 5u, 6u}) {
        auto set = make_correlated_latents(2, rho, {10000}, seed);
        EXPECT_NEAR(correlation(set.combined[0], set.combined[1]), rho * rho / (1 + rho * rho), 0.02);
    }
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5.0);
}

TEST(CorrelatedLatents, Errors) {
    EXPECT_THROW(make_correlated_latents(0, 0.5, {4}, 1), RangeError);
    EXPECT_THROW(make_correlated_latents(2, -0.1, {4}, 1), RangeError);
}

TEST(ConditionalTexture, AdapterIsNeutralAtInitialisation) {
    TextureBase base(tiny_config(), DiffusionSchedule::linear(), 1);
    perturb(base.parameters(), 2);
    ConditionalTextureModel model(tiny_config(), DiffusionSchedule::linear(), 3);
    model.initialize_from(base);
    Rng rng(4);
    const Array x({2, 1, 16, 16}, rng.normal_vector(512));
    const Array masks = stack_images({to_signed(toy::disc_mask(16, 5)), to_signed(toy::disc_mask(16, 3))});
    const Array expected = base.predict_noise(x, 500);
    EXPECT_EQ(model.predict_noise(x, 500, &masks).data, expected.data);
    EXPECT_EQ(model.predict_noise(x, 500, nullptr).data, expected.data);
    // Once the adapter is non-zero, keep = 0 still removes it.
    perturb(model.parameters(), 5);
    nn::NoGradGuard ng;
    const std::vector<float> keep{0.0f, 1.0f};
    const auto dropped = model.forward(nn::Var::constant(x), {500, 500}, &masks, &keep).to_array();
    const auto none = model.forward(nn::Var::constant(x), {500, 500}, nullptr).to_array();
    const auto with = model.forward(nn::Var::constant(x), {500, 500}, &masks).to_array();
    for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(dropped.data[i], none.data[i]);
    for (std::size_t i = 256; i < 512; ++i) EXPECT_EQ(dropped.data[i], with.data[i]);
}

TEST(ConditionalTexture, FinetuneStartsFromBaseUnlessFromScratch) {
    TextureBase base(tiny_config(), DiffusionSchedule::linear(), 1);
    perturb(base.parameters(), 6);
    std::vector<TexturePair> pairs;
    for (auto& p : toy::cell_pairs(4, 16, 7)) pairs.push_back({p.image, p.mask});
    TrainOptions opts;
    opts.steps = 0;
    auto tuned = finetune_conditional(base, pairs, opts, false);
    auto scratch = finetune_conditional(base, pairs, opts, true);
    const auto& bp = base.parameters().params()[3].value();
    EXPECT_EQ(tuned.model.parameters().params()[3].value(), bp);
    EXPECT_NE(scratch.model.parameters().params()[3].value(), bp);
}

TEST(ConditionalTexture, TrainingErrorsAndDeterminism) {
    TextureBase base(tiny_config(), DiffusionSchedule::linear(), 1);
    TrainOptions opts;
    opts.steps = 5;
    opts.batch_size = 4;
    EXPECT_THROW(pretrain_base(base, {}, opts), InputError);
    std::vector<GrayImage> imgs;
    std::vector<TexturePair> pairs;
    for (auto& p : toy::cell_pairs(6, 16, 8)) {
        imgs.push_back(p.image);
        pairs.push_back({p.image, p.mask});
    }
    TextureBase a(tiny_config(), DiffusionSchedule::linear(), 1), b(tiny_config(), DiffusionSchedule::linear(), 1);
    EXPECT_EQ(pretrain_base(a, imgs, opts).losses.back(), pretrain_base(b, imgs, opts).losses.back());
    auto bad = pairs;
    bad[2].mask = MaskImage(8, 8);
    EXPECT_THROW(finetune_conditional(a, bad, opts, false), InputError);
    EXPECT_THROW(finetune_conditional(a, {}, opts, false), InputError);
}

TEST(GenerateTexture, RequiresDeterministicSamplerAndMatchingSlices) {
    ConditionalTextureModel model(tiny_config(), DiffusionSchedule::linear(), 1);
    auto masks = repeated(toy::disc_mask(16, 5), 2);
    auto latents = make_correlated_latents(2, 0.7, {1, 1, 16, 16}, 1);
    SamplerConfig cfg = texture_sampler();
    cfg.eta = 0.5;
    EXPECT_THROW(generate_texture(model, masks, latents, cfg), ConfigurationError);
    auto three = make_correlated_latents(3, 0.7, {1, 1, 16, 16}, 1);
    EXPECT_THROW(generate_texture(model, masks, three, texture_sampler()), ContractViolation);
}

TEST(GenerateTexture, HugeRhoGivesIdenticalSlices) {
    ConditionalTextureModel model(tiny_config(), DiffusionSchedule::linear(), 2);
    perturb(model.parameters(), 9);
    auto masks = repeated(toy::disc_mask(16, 5), 4);
    auto stack = generate_texture(model, masks, make_correlated_latents(4, 1e6, {1, 1, 16, 16}, 5), texture_sampler());
    for (int s = 1; s < 4; ++s)
        for (std::size_t i = 0; i < 256; ++i)
            EXPECT_NEAR(stack.slices[std::size_t(s)].pixels[i], stack.slices[0].pixels[i], 1e-4);
    for (const auto& sl : stack.slices)
        for (float v : sl.pixels) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
}

TEST(GenerateTexture, SingleSliceIsPlainConditionalSampling) {
    ConditionalTextureModel model(tiny_config(), DiffusionSchedule::linear(), 3);
    perturb(model.parameters(), 10);
    const auto mask = toy::disc_mask(16, 6);
    const auto cfg = texture_sampler();
    auto stack = generate_texture(model, repeated(mask, 1), make_correlated_latents(1, 0.0, {1, 1, 16, 16}, 7), cfg);
    const Array cond = stack_images({to_signed(mask)});
    Array x = sample(model.denoiser(), &cond, unique_latent(0, {1, 1, 16, 16}, 7), cfg, model.schedule());
    for (std::size_t i = 0; i < 256; ++i)
        EXPECT_EQ(stack.slices[0].pixels[i], std::clamp(0.5f * (x.data[i] + 1.0f), 0.0f, 1.0f));
}

TEST(TextureCheckpoints, RoundTrip) {
    TextureBase base(tiny_config(), DiffusionSchedule::linear(), 1);
    perturb(base.parameters(), 11);
    ConditionalTextureModel model(tiny_config(), DiffusionSchedule::linear(), 2);
    perturb(model.parameters(), 12);
    const auto dir = std::filesystem::temp_directory_path();
    base.save(dir / "cs_base.ckpt");
    model.save(dir / "cs_cond.ckpt");
    auto b2 = TextureBase::load(dir / "cs_base.ckpt");
    auto m2 = ConditionalTextureModel::load(dir / "cs_cond.ckpt");
    Rng rng(13);
    const Array x({1, 1, 16, 16}, rng.normal_vector(256));
    const Array c = stack_images({to_signed(toy::disc_mask(16, 4))});
    EXPECT_EQ(b2.predict_noise(x, 100).data, base.predict_noise(x, 100).data);
    EXPECT_EQ(m2.predict_noise(x, 100, &c).data, model.predict_noise(x, 100, &c).data);
    EXPECT_THROW(TextureBase::load(dir / "cs_cond.ckpt"), InputError);
    std::filesystem::remove(dir / "cs_base.ckpt");
    std::filesystem::remove(dir / "cs_cond.ckpt");
}

TEST(TextureMetrics, OtsuIouAndSliceCorrelation) {
    const auto mask = toy::disc_mask(16, 5);
    GrayImage tex(16, 16, 0.1f);
    for (std::size_t i = 0; i < 256; ++i)
        if (mask.pixels[i]) tex.pixels[i] = 0.8f;
    EXPECT_DOUBLE_EQ(texture_mask_iou(tex, mask), 1.0);
    TextureStack st;
    st.slices = {tex, tex};
    EXPECT_NEAR(mean_interslice_correlation(st), 1.0, 1e-12);
    GrayImage inv = tex;
    for (auto& v : inv.pixels) v = 0.9f - v;
    st.slices = {tex, inv};
    EXPECT_NEAR(mean_interslice_correlation(st), -1.0, 1e-6);
}
