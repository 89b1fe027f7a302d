#pragma once

#include <filesystem>
#include <numbers>

#include "cellsynth/diffusion.hpp"
#include "cellsynth/shape_library.hpp"
#include "cellsynth/unet.hpp"

namespace cellsynth {

/// Per-view pose features fed to the UNet embedding: view pose then condition pose,
/// each as (cos az, sin az, cos el, sin el). A dropped condition has zero pose features.
inline constexpr int kMultiviewPoseFeatures = 8;

/// Four levels with cross-view attention on the coarsest two.
nn::UNetConfig default_multiview_unet();

struct MultiviewModelConfig {
    int views = 16;
    int image_size = 32;
    double ring_elevation = std::numbers::pi / 6;
    nn::UNetConfig unet = default_multiview_unet();
};

/// Conditioning view looking straight down the z axis, as a microscope does.
inline CameraPose top_view_pose() { return {0.0, std::numbers::pi / 2, 2.0}; }

struct MultiviewBatch {
    /// [B*N, 1, H, W], object-major.
    Array x_t;
    Array eps;
    /// One timestep per object, shared by its N views.
    std::vector<int> timesteps;
    /// [B, 1, H, W] signed condition views; all zero where dropped.
    Array condition;
    std::vector<CameraPose> condition_poses;
    std::vector<std::uint8_t> condition_present;
    int views = 0;
    int objects() const { return int(timesteps.size()); }
};

/// Joint noise predictor: every view sees the condition as an extra input channel,
/// and views of one object attend to each other at the coarse levels.
class MultiviewModel {
public:
    MultiviewModel(const MultiviewModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed);

    nn::Var forward(const MultiviewBatch& batch) const;
    nn::Var forward(const nn::Var& x_t, const std::vector<int>& timesteps, const Array& condition,
                    const std::vector<CameraPose>& condition_poses, const std::vector<std::uint8_t>& present,
                    const std::vector<CameraPose>& view_poses) const;
    /// Noise for the N views of one object; condition == nullptr means unconditional.
    Array predict_noise(const Array& x_t, int t, const Array* condition, const CameraPose& condition_pose) const;

    const MultiviewModelConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    const std::vector<CameraPose>& pose_ring() const { return ring_; }
    nn::ParameterStore& parameters() { return *ps_; }
    const nn::ParameterStore& parameters() const { return *ps_; }

    void save(const std::filesystem::path& path) const;
    /// Throws ConfigurationError when the checkpoint was trained for a different view count.
    static MultiviewModel load(const std::filesystem::path& path, int expected_views);

private:
    MultiviewModelConfig cfg_;
    DiffusionSchedule sched_;
    std::vector<CameraPose> ring_;
    std::shared_ptr<nn::ParameterStore> ps_;
    nn::UNet net_;
};

/// Draws B objects from the corpus, one timestep per object, and drops conditions with probability p.
MultiviewBatch make_multiview_batch(const std::vector<const ShapeRecord*>& objects, const DiffusionSchedule& sched,
                                    Rng& rng, double condition_dropout);

/// Mean over views and pixels of the squared noise error.
double multiview_loss(const Array& predicted, const Array& target);
nn::Var joint_loss(const MultiviewModel& model, const MultiviewBatch& batch);
/// One optimizer step on the joint loss; returns the loss before the update.
double joint_train_step(MultiviewModel& model, const MultiviewBatch& batch, nn::Adam& optimizer);

TrainingLog train_multiview_model(MultiviewModel& model, const std::vector<ShapeRecord>& corpus,
                                  const TrainOptions& opts);

struct MultiviewSample {
    /// Binarized at 0.
    ViewSet views;
    /// Denoised views in [-1, 1] before binarization.
    std::vector<GrayImage> raw;
};

/// Samples N views jointly along one DDIM trajectory with classifier-free guidance.
MultiviewSample sample_views(const MultiviewModel& model, const MaskImage& condition, int views,
                             const SamplerConfig& cfg, const CameraPose& condition_pose = top_view_pose());

}  // namespace cellsynth
