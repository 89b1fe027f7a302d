#pragma once

#include <functional>

#include "cellsynth/nn.hpp"
#include "cellsynth/shape_library.hpp"

namespace cellsynth {

struct SdfFieldConfig {
    /// Sin/cos octaves of the positional encoding (frequencies 2^k * pi).
    int octaves = 6;
    int hidden = 64;
    int hidden_layers = 2;
    /// Radius of the sphere the field starts as.
    double init_radius = 0.5;
    double init_sharpness = 20.0;
};

/// f(p) = |p| - r0 + MLP(encode(p)); the MLP's last layer starts at zero so f starts as a sphere.
/// Negative inside, positive outside.
class SDFField {
public:
    SDFField(const SdfFieldConfig& cfg, std::uint64_t seed);

    /// points: [P, 3] constant positions -> [P, 1].
    nn::Var evaluate(const std::vector<float>& points) const;
    std::vector<float> values(const std::vector<float>& points) const;
    /// Logistic sharpness s > 0 of the rendering density.
    nn::Var sharpness() const;
    double sharpness_value() const;

    const SdfFieldConfig& config() const { return cfg_; }
    nn::ParameterStore& parameters() { return *ps_; }

private:
    SdfFieldConfig cfg_;
    std::shared_ptr<nn::ParameterStore> ps_;
    std::vector<nn::Var> weights_, biases_;
    nn::Var raw_sharpness_;
};

struct SdfFitOptions {
    int iterations = 2000;
    int rays_per_iteration = 256;
    int samples_per_ray = 64;
    /// Half of the rays start on silhouette pixels so thin shapes still get signal.
    double foreground_ray_fraction = 0.5;
    double eikonal_weight = 0.1;
    int eikonal_points = 128;
    double learning_rate = 1e-2;
    /// Cosine decay from learning_rate down to this fraction of it.
    double final_learning_rate_fraction = 0.1;
    double near = -1.2;
    double far = 1.2;
    std::uint64_t seed = 0;
    SdfFieldConfig field;
    std::function<void(int, double)> on_step;
};

struct SdfFitReport {
    std::vector<double> losses;
    double final_sharpness = 0.0;
};

/// Fits a field to binary silhouettes by rendering opacity along orthographic rays
/// (BCE against the silhouette) plus an Eikonal penalty.
SDFField fit_sdf(const ViewSet& views, const SdfFitOptions& opts, SdfFitReport* report = nullptr);

/// Re-renders silhouettes of a field: opacity > 0.5 along each pixel ray.
ViewSet render_field(const SDFField& field, const std::vector<CameraPose>& poses, int side, int samples = 128,
                     double near = -1.2, double far = 1.2);

/// Mean of (|grad f| - 1)^2 over uniform points in the grid cube, by central differences.
double eikonal_residual(const SDFField& field, int points, std::uint64_t seed);

/// Occupied iff f(centre) < 0, largest 6-connected component kept.
VoxelVolume extract_volume(const SDFField& field, int resolution);
VoxelVolume extract_volume(const std::function<double(double, double, double)>& sdf, int resolution);

struct MaskStack {
    std::vector<MaskImage> slices;
    /// Plane positions in voxel units along z, ascending.
    std::vector<double> z;
};

/// S planes at equal intervals over the occupied z-extent, resampled to H x W by nearest neighbour.
MaskStack slice_volume(const VoxelVolume& volume, int slices, int height, int width);

double volume_iou(const VoxelVolume& a, const VoxelVolume& b);
double mean_view_iou(const ViewSet& a, const ViewSet& b);

}  // namespace cellsynth
