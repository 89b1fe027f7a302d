#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cellsynth {

// Error categories map onto CLI exit codes (see tools/cellsynth.cpp).
enum class ErrorCategory {
    Input,
    Contract,
    Range,
    Io,
    Optimization,
    Generation,
    Configuration,
    Dependency,
    Validation,
    Reconstruction,
    UndefinedScore,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}
    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define CELLSYNTH_DEFINE_ERROR(Name, Cat)                                        \
    class Name : public Error {                                                  \
    public:                                                                      \
        explicit Name(const std::string& what) : Error(ErrorCategory::Cat, what) {} \
    };

CELLSYNTH_DEFINE_ERROR(InputError, Input)
CELLSYNTH_DEFINE_ERROR(ContractViolation, Contract)
CELLSYNTH_DEFINE_ERROR(RangeError, Range)
CELLSYNTH_DEFINE_ERROR(IoError, Io)
CELLSYNTH_DEFINE_ERROR(OptimizationFailure, Optimization)
CELLSYNTH_DEFINE_ERROR(GenerationFailure, Generation)
CELLSYNTH_DEFINE_ERROR(ConfigurationError, Configuration)
CELLSYNTH_DEFINE_ERROR(DependencyError, Dependency)
CELLSYNTH_DEFINE_ERROR(ValidationError, Validation)
CELLSYNTH_DEFINE_ERROR(ReconstructionFailure, Reconstruction)
CELLSYNTH_DEFINE_ERROR(UndefinedScoreError, UndefinedScore)

#undef CELLSYNTH_DEFINE_ERROR

const char* to_string(ErrorCategory category);

/// Seeded generator. Every stochastic routine takes one of these explicitly.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
    std::uint64_t next_u64() { return engine_(); }

    void fill_normal(std::vector<float>& out) {
        for (auto& v : out) v = static_cast<float>(normal());
    }
    std::vector<float> normal_vector(std::size_t n) {
        std::vector<float> out(n);
        fill_normal(out);
        return out;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);
std::string hex64(std::uint64_t v);

/// Per-stage, per-sample seed derived from the master seed:
/// splitmix64(master ^ fnv1a64(stage) ^ splitmix64(index)).
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t index = 0);

/// Dense float array with an explicit shape; used as the value type that crosses
/// module boundaries (images, noise, latents, batches).
struct Array {
    std::vector<int> shape;
    std::vector<float> data;

    Array() = default;
    explicit Array(std::vector<int> s, float fill = 0.0f);
    Array(std::vector<int> s, std::vector<float> values);

    std::size_t size() const { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    bool same_shape(const Array& other) const { return shape == other.shape; }
};

std::size_t element_count(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

template <class T>
struct Image {
    int width = 0;
    int height = 0;
    std::vector<T> pixels;

    Image() = default;
    Image(int w, int h, T fill = T{}) : width(w), height(h), pixels(std::size_t(w) * h, fill) {}

    T& at(int x, int y) { return pixels[std::size_t(y) * width + x]; }
    const T& at(int x, int y) const { return pixels[std::size_t(y) * width + x]; }
    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
    bool empty() const { return pixels.empty(); }
    bool operator==(const Image&) const = default;
};

template <class T>
struct Volume {
    int width = 0;
    int height = 0;
    int depth = 0;
    std::vector<T> voxels;

    Volume() = default;
    Volume(int w, int h, int d, T fill = T{})
        : width(w), height(h), depth(d), voxels(std::size_t(w) * h * d, fill) {}

    std::size_t index(int x, int y, int z) const {
        return (std::size_t(z) * height + y) * width + x;
    }
    T& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
    const T& at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
    bool contains(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < width && y < height && z < depth;
    }

    Image<T> slice(int z) const {
        Image<T> out(width, height);
        std::copy_n(voxels.begin() + std::ptrdiff_t(index(0, 0, z)), out.pixels.size(), out.pixels.begin());
        return out;
    }
    void set_slice(int z, const Image<T>& img) {
        std::copy(img.pixels.begin(), img.pixels.end(), voxels.begin() + std::ptrdiff_t(index(0, 0, z)));
    }
    bool operator==(const Volume&) const = default;
};

using MaskImage = Image<std::uint8_t>;
using GrayImage = Image<float>;
/// Instance ids, 0 = background. 2D maps have depth 1.
using LabelMap = Volume<std::uint16_t>;

/// Keeps only the largest 4-connected foreground component. Returns its area.
std::size_t keep_largest_component(MaskImage& mask);
/// Number of 4-connected foreground components.
int count_components(const MaskImage& mask);
/// Keeps only the largest 6-connected foreground component. Returns its volume.
std::size_t keep_largest_component(Volume<std::uint8_t>& volume);
int count_components(const Volume<std::uint8_t>& volume);

std::size_t foreground_area(const MaskImage& mask);
double mask_iou(const MaskImage& a, const MaskImage& b);

/// Stacks equally sized images into [N, 1, H, W].
Array stack_images(const std::vector<GrayImage>& images);
/// Channel `channel` of sample `index` of an [N, C, H, W] array.
GrayImage image_from_array(const Array& a, int index, int channel = 0);

/// {0,1} mask to {-1,+1} values.
GrayImage to_signed(const MaskImage& mask);
/// Foreground where value > threshold.
MaskImage binarize(const GrayImage& image, float threshold = 0.0f);

/// Otsu threshold using a 256-bin histogram spanning the value range.
float otsu_threshold(const std::vector<float>& values);

}  // namespace cellsynth
