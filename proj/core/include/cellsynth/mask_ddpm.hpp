#pragma once

#include <filesystem>

#include "cellsynth/diffusion.hpp"
#include "cellsynth/nn.hpp"
#include "cellsynth/unet.hpp"

namespace cellsynth {

struct MaskModelConfig {
    int image_size = 32;
    nn::UNetConfig unet;
};

/// Unconditional denoiser over single-cell masks encoded as {-1,+1}.
class MaskModel {
public:
    MaskModel(const MaskModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed);

    nn::Var forward(const nn::Var& x_t, const std::vector<int>& timesteps) const;
    /// Noise prediction for a [B,1,H,W] batch at one shared timestep, without building a graph.
    Array predict_noise(const Array& x_t, int t) const;
    Denoiser denoiser() const;

    const MaskModelConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    nn::ParameterStore& parameters() { return *ps_; }
    const nn::ParameterStore& parameters() const { return *ps_; }

    void save(const std::filesystem::path& path) const;
    static MaskModel load(const std::filesystem::path& path);

private:
    MaskModelConfig cfg_;
    DiffusionSchedule sched_;
    std::shared_ptr<nn::ParameterStore> ps_;
    nn::UNet net_;
};

/// Noise-prediction MSE training over a mask corpus (all crops must share one size).
TrainingLog train_mask_model(MaskModel& model, const std::vector<MaskImage>& corpus, const TrainOptions& opts);

struct MaskGenerationOptions {
    /// Resampling attempts per mask after an empty result.
    int max_retries = 8;
    int batch_size = 16;
};

struct MaskGenerationStats {
    int samples_drawn = 0;
    /// Raw binarized samples that already had exactly one component.
    int single_component = 0;
    int rejected_empty = 0;
};

/// Samples `count` masks: binarize at 0, keep the largest component, resample empties.
std::vector<MaskImage> generate_masks(const MaskModel& model, int count, const SamplerConfig& cfg,
                                      const MaskGenerationOptions& opts = {}, MaskGenerationStats* stats = nullptr);

}  // namespace cellsynth
