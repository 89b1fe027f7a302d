#pragma once

// Small synthetic corpora for smoke runs, tests and benchmarks.

#include "cellsynth/common.hpp"

namespace cellsynth::toy {

/// Filled ellipse with random semi-axes and orientation, centred with a little jitter.
MaskImage ellipse_mask(int size, Rng& rng, double min_axis = 0.18, double max_axis = 0.36);
std::vector<MaskImage> ellipse_masks(int count, int size, std::uint64_t seed);

/// Cell-like texture for a mask: bright speckled interior with a darker rim on a dim noisy background.
GrayImage cell_texture(const MaskImage& mask, Rng& rng);

struct CellPair {
    GrayImage image;
    MaskImage mask;
};
std::vector<CellPair> cell_pairs(int count, int size, std::uint64_t seed);

/// Disc of the given radius centred in a size x size image (pixel centres within radius).
MaskImage disc_mask(int size, double radius, double cx = -1, double cy = -1);

}  // namespace cellsynth::toy
