#pragma once

#include <array>
#include <filesystem>

#include "cellsynth/common.hpp"

namespace cellsynth {

/// Real orthonormal spherical harmonic Y_l^m; theta is the polar angle, phi the azimuth.
double real_spherical_harmonic(int l, int m, double theta, double phi);

/// Star-convex shape r(theta, phi) = |sum a_lm Y_lm| / max, for l <= L and |m| <= min(l, M).
struct SphericalHarmonicShape {
    int order = 0;
    int degree = 0;
    std::uint64_t seed = 0;
    /// Ordered by l, then m from -min(l,M) to min(l,M).
    std::vector<double> coefficients;
    /// Reciprocal of the raw maximum radius.
    double normalization = 1.0;

    static std::size_t coefficient_count(int order, int degree);
    double raw_radius(double theta, double phi) const;
    double radius(double theta, double phi) const { return normalization * raw_radius(theta, phi); }
    /// Radius along an arbitrary nonzero direction.
    double radius_along(double x, double y, double z) const;
};

SphericalHarmonicShape generate_sh_shape(std::uint64_t seed, int order, int degree);

struct CameraPose {
    double azimuth = 0.0;
    double elevation = 0.0;
    double distance = 2.0;
};

/// Unit vectors of an orthographic camera: forward points from the camera to the origin.
struct CameraBasis {
    std::array<double, 3> forward, right, up;
};
CameraBasis camera_basis(const CameraPose& pose);

using VoxelVolume = Volume<std::uint8_t>;

/// Shapes live in the unit ball; the grid spans [-1/0.9, 1/0.9]^3 so radius 1 maps to 0.45 D.
constexpr double kGridFill = 0.45;
/// World coordinate of the centre of voxel (or pixel) index i on an axis of n cells.
inline double grid_coordinate(int i, int n) { return (i + 0.5 - 0.5 * n) / (kGridFill * n); }

VoxelVolume voxelize(const SphericalHarmonicShape& shape, int resolution);

struct ViewSet {
    std::vector<MaskImage> views;
    std::vector<CameraPose> poses;
};

/// Orthographic binary projection: a pixel is set when trilinear occupancy reaches 0.5 anywhere
/// along its ray. Pixel centres use the grid's world frame, so radius 1 covers 0.45 * side pixels.
ViewSet render_silhouettes(const VoxelVolume& volume, const std::vector<CameraPose>& poses, int side);

std::vector<CameraPose> sample_pose_ring(int count, double elevation);
/// Direction uniform on the sphere.
CameraPose random_pose(Rng& rng);

/// One corpus entry: ring views plus one conditioning view from a random direction.
struct ShapeRecord {
    SphericalHarmonicShape shape;
    ViewSet ring;
    MaskImage condition;
    CameraPose condition_pose;
};

struct ShapeCorpusOptions {
    int order = 5;
    int degree = 3;
    int views = 16;
    double ring_elevation = 0.5235987755982988;  // 30 degrees
    int view_size = 32;
    int voxel_resolution = 64;
};

ShapeRecord make_shape_record(std::uint64_t seed, const ShapeCorpusOptions& opts);

/// One directory per shape: view_NN.png, condition.png and meta.json.
void save_shape_record(const std::filesystem::path& dir, const ShapeRecord& record);
ShapeRecord load_shape_record(const std::filesystem::path& dir);
std::vector<ShapeRecord> load_shape_corpus(const std::filesystem::path& root);

}  // namespace cellsynth
