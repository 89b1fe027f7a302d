#include "cellsynth/common.hpp"

#include <array>
#include <cstdio>
#include <numeric>

namespace cellsynth {

const char* to_string(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::Input: return "input";
        case ErrorCategory::Contract: return "contract";
        case ErrorCategory::Range: return "range";
        case ErrorCategory::Io: return "io";
        case ErrorCategory::Optimization: return "optimization";
        case ErrorCategory::Generation: return "generation";
        case ErrorCategory::Configuration: return "configuration";
        case ErrorCategory::Dependency: return "dependency";
        case ErrorCategory::Validation: return "validation";
        case ErrorCategory::Reconstruction: return "reconstruction";
        case ErrorCategory::UndefinedScore: return "undefined-score";
    }
    return "unknown";
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t index) {
    return splitmix64(master ^ fnv1a64(stage) ^ splitmix64(index));
}

std::size_t element_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ContractViolation("negative dimension in shape " + shape_string(shape));
        n *= std::size_t(d);
    }
    return n;
}

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Array::Array(std::vector<int> s, float fill) : shape(std::move(s)), data(element_count(shape), fill) {}

Array::Array(std::vector<int> s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != element_count(shape))
        throw ContractViolation("array data size " + std::to_string(data.size()) + " does not match shape " +
                                shape_string(shape));
}

namespace {

// Labels components with an explicit stack; returns per-pixel labels (0 = background) and sizes.
template <class Neighbors>
std::vector<std::size_t> label_components(const std::vector<std::uint8_t>& fg, std::vector<int>& labels,
                                          Neighbors&& neighbors) {
    labels.assign(fg.size(), 0);
    std::vector<std::size_t> sizes{0};
    std::vector<std::size_t> stack;
    for (std::size_t seed = 0; seed < fg.size(); ++seed) {
        if (!fg[seed] || labels[seed]) continue;
        const int id = int(sizes.size());
        std::size_t count = 0;
        stack.push_back(seed);
        labels[seed] = id;
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            ++count;
            neighbors(cur, [&](std::size_t nb) {
                if (fg[nb] && !labels[nb]) {
                    labels[nb] = id;
                    stack.push_back(nb);
                }
            });
        }
        sizes.push_back(count);
    }
    return sizes;
}

std::vector<std::size_t> label_2d(const MaskImage& mask, std::vector<int>& labels) {
    const int w = mask.width, h = mask.height;
    return label_components(mask.pixels, labels, [w, h](std::size_t i, auto&& visit) {
        const int x = int(i % w), y = int(i / w);
        if (x > 0) visit(i - 1);
        if (x + 1 < w) visit(i + 1);
        if (y > 0) visit(i - w);
        if (y + 1 < h) visit(i + w);
    });
}

std::vector<std::size_t> label_3d(const Volume<std::uint8_t>& vol, std::vector<int>& labels) {
    const int w = vol.width, h = vol.height, d = vol.depth;
    const std::size_t plane = std::size_t(w) * h;
    return label_components(vol.voxels, labels, [=](std::size_t i, auto&& visit) {
        const int x = int(i % w), y = int((i / w) % h), z = int(i / plane);
        if (x > 0) visit(i - 1);
        if (x + 1 < w) visit(i + 1);
        if (y > 0) visit(i - w);
        if (y + 1 < h) visit(i + w);
        if (z > 0) visit(i - plane);
        if (z + 1 < d) visit(i + plane);
    });
}

std::size_t keep_largest(std::vector<std::uint8_t>& fg, const std::vector<int>& labels,
                         const std::vector<std::size_t>& sizes) {
    if (sizes.size() <= 1) return 0;
    const auto best = std::size_t(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = (labels[i] == int(best)) ? 1 : 0;
    return sizes[best];
}

}  // namespace

std::size_t keep_largest_component(MaskImage& mask) {
    std::vector<int> labels;
    auto sizes = label_2d(mask, labels);
    return keep_largest(mask.pixels, labels, sizes);
}

int count_components(const MaskImage& mask) {
    std::vector<int> labels;
    return int(label_2d(mask, labels).size()) - 1;
}

std::size_t keep_largest_component(Volume<std::uint8_t>& volume) {
    std::vector<int> labels;
    auto sizes = label_3d(volume, labels);
    return keep_largest(volume.voxels, labels, sizes);
}

int count_components(const Volume<std::uint8_t>& volume) {
    std::vector<int> labels;
    return int(label_3d(volume, labels).size()) - 1;
}

std::size_t foreground_area(const MaskImage& mask) {
    return std::size_t(std::count_if(mask.pixels.begin(), mask.pixels.end(), [](auto v) { return v != 0; }));
}

double mask_iou(const MaskImage& a, const MaskImage& b) {
    if (a.width != b.width || a.height != b.height)
        throw ContractViolation("mask_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const bool fa = a.pixels[i] != 0, fb = b.pixels[i] != 0;
        inter += (fa && fb);
        uni += (fa || fb);
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

float otsu_threshold(const std::vector<float>& values) {
    if (values.empty()) return 0.0f;
    const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    const float lo = *mn_it, hi = *mx_it;
    if (hi <= lo) return lo;
    constexpr int bins = 256;
    std::array<double, bins> hist{};
    const float scale = (bins - 1) / (hi - lo);
    for (float v : values) hist[std::size_t((v - lo) * scale + 0.5f)] += 1.0;

    const double total = double(values.size());
    double sum_all = 0.0;
    for (int i = 0; i < bins; ++i) sum_all += i * hist[i];
    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_bin = 0;
    for (int i = 0; i < bins; ++i) {
        w0 += hist[i];
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += i * hist[i];
        const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_bin = i;
        }
    }
    // Threshold sits between best_bin and the next bin; values strictly above it are foreground.
    return lo + (float(best_bin) + 0.5f) / scale;
}

Array stack_images(const std::vector<GrayImage>& images) {
    if (images.empty()) return Array({0, 1, 0, 0});
    const int w = images[0].width, h = images[0].height;
    Array out({int(images.size()), 1, h, w});
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].width != w || images[i].height != h)
            throw InputError("stack_images: mixed image sizes " + std::to_string(w) + "x" + std::to_string(h) + " and " +
                             std::to_string(images[i].width) + "x" + std::to_string(images[i].height));
        std::copy(images[i].pixels.begin(), images[i].pixels.end(), out.data.begin() + std::ptrdiff_t(i * w * h));
    }
    return out;
}

GrayImage image_from_array(const Array& a, int index, int channel) {
    if (a.shape.size() != 4) throw ContractViolation("image_from_array: expected [N,C,H,W], got " + shape_string(a.shape));
    const int c = a.shape[1], h = a.shape[2], w = a.shape[3];
    GrayImage img(w, h);
    const std::size_t off = (std::size_t(index) * c + channel) * std::size_t(h) * w;
    std::copy_n(a.data.begin() + std::ptrdiff_t(off), img.pixels.size(), img.pixels.begin());
    return img;
}

GrayImage to_signed(const MaskImage& mask) {
    GrayImage out(mask.width, mask.height);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) out.pixels[i] = mask.pixels[i] ? 1.0f : -1.0f;
    return out;
}

MaskImage binarize(const GrayImage& image, float threshold) {
    MaskImage out(image.width, image.height);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) out.pixels[i] = image.pixels[i] > threshold ? 1 : 0;
    return out;
}

}  // namespace cellsynth
