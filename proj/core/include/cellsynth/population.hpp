#pragma once

#include "cellsynth/surface_recon.hpp"
#include "cellsynth/texture_diffusion.hpp"

namespace cellsynth {

struct PlacementPolicy {
    /// Probability that a cell is placed near the cells already on the canvas.
    double clustering_probability = 0.5;
    int neighborhood_radius = 20;
    int max_attempts = 100;
    int target_count = 10;
};

struct CanvasSpec {
    int width = 256;
    int height = 256;
    /// 1 for 2D frames.
    int depth = 1;
    float background = 0.0f;
    /// Additive Gaussian sensor noise on the raw frame; 0 disables.
    double noise_sigma = 0.0;
};

/// One synthetic cell: S texture slices and their masks (S = 1 in 2D).
struct CellSample {
    TextureStack texture;
    MaskStack mask;
};

struct LabeledFrame {
    Volume<float> raw;
    LabelMap labels;
    int placed = 0;
    int skipped = 0;
};

struct Placement {
    int x = 0;
    int y = 0;
    int z = 0;
};

/// Pastes the cell's texture under its mask with the mask origin at `at` and writes `label` there.
/// Returns false and leaves the frame untouched if the mask leaves the canvas or hits a labelled voxel.
bool composite_cell(LabeledFrame& frame, const CellSample& cell, const Placement& at, std::uint16_t label);

/// Places policy.target_count cells, cycling through `cells` in order. Each cell is placed near the
/// existing ones with probability p (uniformly in the radius-dilated footprint of placed cells,
/// outside it), otherwise uniformly; overlapping draws are retried, and a cell that never fits is skipped.
LabeledFrame synthesize_population(const std::vector<CellSample>& cells, const CanvasSpec& canvas,
                                   const PlacementPolicy& policy, std::uint64_t seed);

/// Median of the pixels outside the masks of a crop corpus.
float estimate_background(const std::vector<TexturePair>& crops);

/// Exact Euclidean distance from every pixel to the nearest foreground pixel (0 on foreground).
Image<double> distance_to_foreground(const MaskImage& mask);

}  // namespace cellsynth
