#include "cellsynth/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include <png.h>
#include <tiffio.h>

namespace cellsynth {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct TiffCloser {
    void operator()(TIFF* t) const {
        if (t) TIFFClose(t);
    }
};
using TiffPtr = std::unique_ptr<TIFF, TiffCloser>;

// libtiff reports through global handlers; keep them quiet and rely on return codes.
void silence_tiff() {
    static const bool once = [] {
        TIFFSetWarningHandler(nullptr);
        TIFFSetErrorHandler(nullptr);
        return true;
    }();
    (void)once;
}

void ensure_parent(const std::filesystem::path& path) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
}

}  // namespace

void write_png8(const std::filesystem::path& path, const Image<std::uint8_t>& image) {
    ensure_parent(path);
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot write PNG: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y)
        png_write_row(png, const_cast<png_bytep>(image.pixels.data() + std::size_t(y) * image.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image<std::uint8_t> read_png8(const std::filesystem::path& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open PNG: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng initialisation failed");
    }
    Image<std::uint8_t> img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unreadable PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const int w = int(png_get_image_width(png, info)), h = int(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info), depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img = Image<std::uint8_t>(w, h);
    for (int y = 0; y < h; ++y) png_read_row(png, img.pixels.data() + std::size_t(y) * w, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_mask_png(const std::filesystem::path& path, const MaskImage& mask) {
    Image<std::uint8_t> img(mask.width, mask.height);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) img.pixels[i] = mask.pixels[i] ? 255 : 0;
    write_png8(path, img);
}

MaskImage read_mask_png(const std::filesystem::path& path) {
    MaskImage m = read_png8(path);
    for (auto& v : m.pixels) v = v ? 1 : 0;
    return m;
}

void write_tiff(const std::filesystem::path& path, const std::vector<Image16>& pages, int bits) {
    silence_tiff();
    if (bits != 8 && bits != 16) throw RangeError("TIFF bit depth must be 8 or 16");
    if (pages.empty()) throw ContractViolation("write_tiff: no pages");
    ensure_parent(path);
    TiffPtr tif(TIFFOpen(path.c_str(), "w"));
    if (!tif) throw IoError("cannot write TIFF: " + path.string());
    std::vector<std::uint8_t> row8;
    for (std::size_t p = 0; p < pages.size(); ++p) {
        const auto& img = pages[p];
        TIFF* t = tif.get();
        TIFFSetField(t, TIFFTAG_IMAGEWIDTH, std::uint32_t(img.width));
        TIFFSetField(t, TIFFTAG_IMAGELENGTH, std::uint32_t(img.height));
        TIFFSetField(t, TIFFTAG_SAMPLESPERPIXEL, 1);
        TIFFSetField(t, TIFFTAG_BITSPERSAMPLE, bits);
        TIFFSetField(t, TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_MINISBLACK);
        TIFFSetField(t, TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
        TIFFSetField(t, TIFFTAG_COMPRESSION, COMPRESSION_NONE);
        TIFFSetField(t, TIFFTAG_ROWSPERSTRIP, std::uint32_t(img.height));
        if (pages.size() > 1) {
            TIFFSetField(t, TIFFTAG_SUBFILETYPE, FILETYPE_PAGE);
            TIFFSetField(t, TIFFTAG_PAGENUMBER, std::uint16_t(p), std::uint16_t(pages.size()));
        }
        for (int y = 0; y < img.height; ++y) {
            const std::uint16_t* src = img.pixels.data() + std::size_t(y) * img.width;
            int ok;
            if (bits == 16) {
                ok = TIFFWriteScanline(t, const_cast<std::uint16_t*>(src), std::uint32_t(y), 0);
            } else {
                row8.resize(std::size_t(img.width));
                for (int x = 0; x < img.width; ++x) {
                    if (src[x] > 255) throw RangeError("value " + std::to_string(src[x]) + " does not fit 8-bit TIFF");
                    row8[std::size_t(x)] = std::uint8_t(src[x]);
                }
                ok = TIFFWriteScanline(t, row8.data(), std::uint32_t(y), 0);
            }
            if (ok < 0) throw IoError("failed writing TIFF: " + path.string());
        }
        if (!TIFFWriteDirectory(t)) throw IoError("failed writing TIFF directory: " + path.string());
    }
}

std::vector<Image16> read_tiff(const std::filesystem::path& path, int* bits_out) {
    silence_tiff();
    if (!std::filesystem::exists(path)) throw IoError("TIFF not found: " + path.string());
    TiffPtr tif(TIFFOpen(path.c_str(), "r"));
    if (!tif) throw IoError("unreadable TIFF: " + path.string());
    std::vector<Image16> pages;
    int bits_seen = 0;
    do {
        TIFF* t = tif.get();
        std::uint32_t w = 0, h = 0;
        std::uint16_t bits = 0, spp = 1;
        TIFFGetField(t, TIFFTAG_IMAGEWIDTH, &w);
        TIFFGetField(t, TIFFTAG_IMAGELENGTH, &h);
        TIFFGetFieldDefaulted(t, TIFFTAG_BITSPERSAMPLE, &bits);
        TIFFGetFieldDefaulted(t, TIFFTAG_SAMPLESPERPIXEL, &spp);
        if (spp != 1 || (bits != 8 && bits != 16))
            throw IoError("unsupported TIFF layout (" + std::to_string(spp) + " samples, " + std::to_string(bits) +
                          " bits): " + path.string());
        bits_seen = std::max<int>(bits_seen, bits);
        Image16 img(static_cast<int>(w), static_cast<int>(h));
        std::vector<std::uint8_t> buf(std::size_t(TIFFScanlineSize(t)));
        for (std::uint32_t y = 0; y < h; ++y) {
            if (TIFFReadScanline(t, buf.data(), y, 0) < 0) throw IoError("corrupt TIFF scanline: " + path.string());
            std::uint16_t* dst = img.pixels.data() + std::size_t(y) * w;
            if (bits == 16) {
                std::memcpy(dst, buf.data(), std::size_t(w) * 2);
            } else {
                for (std::uint32_t x = 0; x < w; ++x) dst[x] = buf[x];
            }
        }
        pages.push_back(std::move(img));
    } while (TIFFReadDirectory(tif.get()));
    if (bits_out) *bits_out = bits_seen;
    return pages;
}

Image16 to_uint16(const GrayImage& image) {
    Image16 out(image.width, image.height);
    for (std::size_t i = 0; i < image.pixels.size(); ++i)
        out.pixels[i] = std::uint16_t(std::lround(std::clamp(double(image.pixels[i]), 0.0, 1.0) * 65535.0));
    return out;
}

GrayImage from_uint16(const Image16& image, double max_value) {
    GrayImage out(image.width, image.height);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) out.pixels[i] = float(image.pixels[i] / max_value);
    return out;
}

void write_mask_stack(const std::filesystem::path& path, const std::vector<MaskImage>& slices) {
    std::vector<Image16> pages;
    for (const auto& s : slices) {
        Image16 p(s.width, s.height);
        for (std::size_t i = 0; i < s.pixels.size(); ++i) p.pixels[i] = s.pixels[i] ? 255 : 0;
        pages.push_back(std::move(p));
    }
    write_tiff(path, pages, 8);
}

std::vector<MaskImage> read_mask_stack(const std::filesystem::path& path) {
    std::vector<MaskImage> out;
    for (const auto& p : read_tiff(path)) {
        MaskImage m(p.width, p.height);
        for (std::size_t i = 0; i < p.pixels.size(); ++i) m.pixels[i] = p.pixels[i] ? 1 : 0;
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace cellsynth
