#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace cellsynth::pipeline {

enum class Mode { Planar, Volumetric };

struct PipelineConfig {
    Mode mode = Mode::Planar;
    std::uint64_t seed = 0;
    std::filesystem::path work_dir = "work";
    std::filesystem::path output_dir = "synthetic";

    struct Data {
        /// CTC sequence directories; empty means a toy corpus is generated instead.
        std::filesystem::path train;
        std::filesystem::path test;
        int crop_size = 128;
        int toy_frames = 4;
        int toy_cells_per_frame = 8;
        int toy_frame_size = 128;
    } data;

    struct Diffusion {
        int timesteps = 1000;
        int inference_steps = 50;
        /// Mask and view sampling; texture sampling always runs at eta = 0.
        double eta = 1.0;
    } diffusion;

    struct MaskDdpm {
        int steps = 2000;
        int batch_size = 16;
        double learning_rate = 2e-3;
        int base_channels = 16;
        int count = 100;
    } mask_ddpm;

    struct Shapes {
        int order = 5;
        int degree = 3;
        int count = 200;
        int voxel_resolution = 64;
    } shapes;

    struct Multiview {
        int views = 0;
        int steps = 2000;
        int batch_size = 4;
        double learning_rate = 2e-3;
        int base_channels = 16;
        double guidance_scale = 2.0;
    } multiview;

    struct Reconstruct {
        int resolution = 0;
        int iterations = 2000;
        int rays = 256;
        int samples = 64;
        double learning_rate = 1e-2;
    } reconstruct;

    struct Texture {
        int slices = 0;
        double rho = 0.7;
        int pretrain_steps = 2000;
        int finetune_steps = 1000;
        int batch_size = 16;
        double learning_rate = 2e-3;
        int base_channels = 16;
        double guidance_scale = 5.0;
    } texture;

    struct Population {
        double clustering_probability = 0.5;
        int radius = 20;
        int max_attempts = 100;
        int cells = 10;
        int frames = 10;
        int width = 256;
        int height = 256;
        int depth = 0;
        double noise_sigma = 0.0;
    } population;

    struct Ablation {
        bool use_sh_volumes_directly = false;
        bool texture_from_scratch = false;
    } ablation;

    struct Evaluate {
        int feature_side = 8;
    } evaluate;

    bool volumetric() const { return mode == Mode::Volumetric; }
    /// Slices per synthetic cell: S in volumetric mode, 1 otherwise.
    int slice_count() const { return volumetric() ? texture.slices : 1; }
    int canvas_depth() const { return volumetric() ? population.depth : 1; }
};

/// Parses TOML text. Unknown keys, wrong types and out-of-range values are collected and reported
/// together in one ValidationError, one line per field.
PipelineConfig parse_config(const std::string& toml);
PipelineConfig load_config(const std::filesystem::path& path);

/// Canonical form of every field, used for config hashes and manifests.
nlohmann::json to_json(const PipelineConfig& cfg);

/// A small but complete configuration for smoke runs at 32x32.
std::string toy_config_text(Mode mode);

}  // namespace cellsynth::pipeline
