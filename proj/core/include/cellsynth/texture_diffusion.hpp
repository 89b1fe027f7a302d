#pragma once

#include <filesystem>

#include "cellsynth/diffusion.hpp"
#include "cellsynth/surface_recon.hpp"
#include "cellsynth/unet.hpp"

namespace cellsynth {

struct TextureModelConfig {
    int image_size = 32;
    nn::UNetConfig unet;
};

/// Unconditional denoiser over grayscale crops; pixel values [0,1] are trained as [-1,1].
class TextureBase {
public:
    TextureBase(const TextureModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed);

    nn::Var forward(const nn::Var& x_t, const std::vector<int>& timesteps) const;
    Array predict_noise(const Array& x_t, int t) const;

    const TextureModelConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    nn::ParameterStore& parameters() { return *ps_; }
    const nn::ParameterStore& parameters() const { return *ps_; }

    void save(const std::filesystem::path& path) const;
    static TextureBase load(const std::filesystem::path& path);

private:
    TextureModelConfig cfg_;
    DiffusionSchedule sched_;
    std::shared_ptr<nn::ParameterStore> ps_;
    nn::UNet net_;
};

/// Base UNet plus a mask adapter whose zero-initialised outputs are added after each encoder level.
class ConditionalTextureModel {
public:
    ConditionalTextureModel(const TextureModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed);

    /// masks: [B,1,H,W] signed masks; keep[b] == 0 removes the adapter for that sample.
    nn::Var forward(const nn::Var& x_t, const std::vector<int>& timesteps, const Array* masks,
                    const std::vector<float>* keep = nullptr) const;
    /// condition == nullptr gives the base (unconditional) prediction.
    Array predict_noise(const Array& x_t, int t, const Array* condition) const;
    Denoiser denoiser() const;

    /// Copies every base weight; the adapter keeps its own initialisation.
    void initialize_from(const TextureBase& base);

    const TextureModelConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    nn::ParameterStore& parameters() { return *ps_; }
    const nn::ParameterStore& parameters() const { return *ps_; }

    void save(const std::filesystem::path& path) const;
    static ConditionalTextureModel load(const std::filesystem::path& path);

private:
    TextureModelConfig cfg_;
    DiffusionSchedule sched_;
    std::shared_ptr<nn::ParameterStore> ps_;
    nn::UNet net_;
    nn::ConditionAdapter adapter_;
};

TrainingLog pretrain_base(TextureBase& base, const std::vector<GrayImage>& corpus, const TrainOptions& opts);

struct TexturePair {
    GrayImage image;
    MaskImage mask;
};

struct FinetuneResult {
    ConditionalTextureModel model;
    TrainingLog log;
};

/// Trains base and adapter jointly on image/mask pairs. With from_scratch the base weights keep
/// their random initialisation instead of being copied from `base`.
FinetuneResult finetune_conditional(const TextureBase& base, const std::vector<TexturePair>& pairs,
                                    const TrainOptions& opts, bool from_scratch);

struct CorrelatedLatentSet {
    int slices = 0;
    double rho = 0.0;
    Array common;
    std::vector<Array> unique;
    /// c_T^s = rho / sqrt(1 + rho^2) * common + 1 / sqrt(1 + rho^2) * unique[s].
    std::vector<Array> combined;
};

/// The common draw comes from its own stream; unique[s] from stream s, so slice 0 at rho = 0 is the
/// plain single-latent draw of the same seed.
CorrelatedLatentSet make_correlated_latents(int slices, double rho, const std::vector<int>& shape,
                                            std::uint64_t seed);
/// The standard-normal latent that slice s of a correlated set uses as its unique part.
Array unique_latent(int slice, const std::vector<int>& shape, std::uint64_t seed);

struct TextureStack {
    /// Values in [0, 1].
    std::vector<GrayImage> slices;
};

/// Deterministic (eta = 0) guided sampling of one texture per mask slice from its correlated latent.
TextureStack generate_texture(const ConditionalTextureModel& model, const MaskStack& masks,
                              const CorrelatedLatentSet& latents, const SamplerConfig& cfg);

/// IoU between the Otsu foreground of a texture and a mask.
double texture_mask_iou(const GrayImage& texture, const MaskImage& mask);

/// Mean Pearson correlation of pixel values over adjacent slice pairs.
double mean_interslice_correlation(const TextureStack& stack);

}  // namespace cellsynth
