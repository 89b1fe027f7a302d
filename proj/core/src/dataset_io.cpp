#include "cellsynth/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include <spdlog/spdlog.h>

#include "cellsynth/image_io.hpp"

namespace cellsynth {

namespace fs = std::filesystem;

namespace {

std::vector<std::pair<int, fs::path>> indexed_files(const fs::path& dir, const std::regex& pattern) {
    std::vector<std::pair<int, fs::path>> out;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern)) out.emplace_back(std::stoi(m[1].str()), entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string frame_name(const char* prefix, int index) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%03d.tif", prefix, index);
    return buf;
}

float median(std::vector<float> v) {
    if (v.empty()) return 0.0f;
    const auto mid = v.begin() + std::ptrdiff_t(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

std::size_t CTCSequence::annotated_frames() const {
    return std::size_t(std::count_if(frames.begin(), frames.end(), [](const CTCFrame& f) { return f.silver.has_value(); }));
}

CTCSequence load_sequence(const fs::path& directory) {
    fs::path dir = directory.lexically_normal();
    if (dir.filename().empty()) dir = dir.parent_path();
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw InputError("not a sequence directory: " + directory.string());

    CTCSequence seq;
    seq.directory = dir;
    seq.name = dir.filename().string();
    std::map<int, CTCFrame> frames;
    for (auto& [i, p] : indexed_files(dir, std::regex(R"(t(\d+)\.tif)"))) frames[i] = CTCFrame{i, p, std::nullopt, {}};
    if (frames.empty()) throw InputError("no raw frames t*.tif in " + dir.string());

    const std::regex silver(R"(man_seg(\d+)\.tif)");
    auto masks = indexed_files(dir.parent_path() / (seq.name + "_ST") / "SEG", silver);
    if (masks.empty()) masks = indexed_files(dir, silver);  // flat layout: masks beside the frames
    for (auto& [i, p] : masks) {
        auto it = frames.find(i);
        if (it == frames.end()) throw InputError("mask " + p.string() + " has no matching raw frame");
        it->second.silver = p;
    }
    for (auto& [i, p] :
         indexed_files(dir.parent_path() / (seq.name + "_GT") / "SEG", std::regex(R"(man_seg_?(\d+)(?:_\d+)?\.tif)"))) {
        auto it = frames.find(i);
        if (it == frames.end()) throw InputError("mask " + p.string() + " has no matching raw frame");
        it->second.gold.push_back(p);
    }
    for (auto& [i, f] : frames) seq.frames.push_back(std::move(f));
    const bool any_mask = std::any_of(seq.frames.begin(), seq.frames.end(),
                                      [](const CTCFrame& f) { return f.silver || !f.gold.empty(); });
    if (!any_mask) throw InputError("no segmentation masks for any frame of " + dir.string());
    return seq;
}

Volume<float> read_raw_frame(const CTCFrame& frame) {
    const auto pages = read_tiff(frame.raw);
    if (pages.empty()) throw IoError("empty TIFF: " + frame.raw.string());
    Volume<float> v(pages[0].width, pages[0].height, int(pages.size()));
    for (std::size_t z = 0; z < pages.size(); ++z) {
        if (pages[z].width != v.width || pages[z].height != v.height)
            throw IoError("TIFF pages differ in size: " + frame.raw.string());
        for (std::size_t i = 0; i < pages[z].pixels.size(); ++i)
            v.voxels[z * pages[z].pixels.size() + i] = float(pages[z].pixels[i]);
    }
    return v;
}

LabelMap read_label_map(const fs::path& path) {
    const auto pages = read_tiff(path);
    if (pages.empty()) throw IoError("empty TIFF: " + path.string());
    LabelMap m(pages[0].width, pages[0].height, int(pages.size()));
    for (std::size_t z = 0; z < pages.size(); ++z) {
        if (pages[z].width != m.width || pages[z].height != m.height)
            throw IoError("TIFF pages differ in size: " + path.string());
        m.set_slice(int(z), pages[z]);
    }
    return m;
}

CropExtraction extract_crops(const std::vector<Volume<float>>& raw, const std::vector<LabelMap>& labels, int size,
                             const std::vector<int>& frame_ids) {
    if (size < 1) throw RangeError("crop size must be positive");
    if (raw.size() != labels.size()) throw InputError("raw frames and label maps differ in count");
    CropExtraction out;
    for (std::size_t f = 0; f < raw.size(); ++f) {
        const auto& img = raw[f];
        const auto& lab = labels[f];
        const int fid = f < frame_ids.size() ? frame_ids[f] : int(f);
        if (img.width != lab.width || img.height != lab.height || img.depth != lab.depth)
            throw InputError("frame " + std::to_string(fid) + ": raw and label shapes differ");

        struct Stats {
            int x0 = 1 << 30, x1 = -1, y0 = 1 << 30, y1 = -1;
            double sx = 0, sy = 0;
            std::size_t n = 0;
        };
        std::map<int, Stats> inst;
        std::vector<float> background;
        for (int z = 0; z < lab.depth; ++z)
            for (int y = 0; y < lab.height; ++y)
                for (int x = 0; x < lab.width; ++x) {
                    const int id = lab.at(x, y, z);
                    if (!id) {
                        background.push_back(img.at(x, y, z));
                        continue;
                    }
                    auto& s = inst[id];
                    s.x0 = std::min(s.x0, x);
                    s.x1 = std::max(s.x1, x);
                    s.y0 = std::min(s.y0, y);
                    s.y1 = std::max(s.y1, y);
                    s.sx += x;
                    s.sy += y;
                    ++s.n;
                }
        const float bg = background.empty() ? median(img.voxels) : median(std::move(background));

        for (const auto& [id, s] : inst) {
            if (s.x1 - s.x0 + 1 > size || s.y1 - s.y0 + 1 > size) {
                out.skipped.push_back({fid, id, "bounding box exceeds crop size"});
                spdlog::warn("frame {} instance {}: bounding box {}x{} exceeds crop size {}, skipped", fid, id,
                             s.x1 - s.x0 + 1, s.y1 - s.y0 + 1, size);
                continue;
            }
            // Centre on the centroid, then shift just enough to keep the whole instance inside.
            const double cx = s.sx / double(s.n), cy = s.sy / double(s.n);
            const int ox = std::clamp(int(std::lround(cx + 0.5 - size / 2.0)), s.x1 - size + 1, s.x0);
            const int oy = std::clamp(int(std::lround(cy + 0.5 - size / 2.0)), s.y1 - size + 1, s.y0);
            CellCrop crop;
            crop.frame = fid;
            crop.instance = id;
            crop.origin_x = ox;
            crop.origin_y = oy;
            float lo = 1e30f, hi = -1e30f;
            for (int z = 0; z < img.depth; ++z) {
                GrayImage g(size, size, bg);
                MaskImage m(size, size);
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const int fx = ox + x, fy = oy + y;
                        if (!img.contains(fx, fy, z)) continue;
                        g.at(x, y) = img.at(fx, fy, z);
                        m.at(x, y) = lab.at(fx, fy, z) == id ? 1 : 0;
                    }
                for (float v : g.pixels) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                crop.image.push_back(std::move(g));
                crop.mask.push_back(std::move(m));
            }
            const float range = hi - lo;
            for (auto& g : crop.image)
                for (auto& v : g.pixels) v = range > 0 ? (v - lo) / range : 0.0f;
            out.crops.push_back(std::move(crop));
        }
    }
    return out;
}

CropExtraction extract_crops(const CTCSequence& seq, int size) {
    std::vector<Volume<float>> raw;
    std::vector<LabelMap> labels;
    std::vector<int> ids;
    for (const auto& f : seq.frames) {
        if (!f.silver) continue;
        raw.push_back(read_raw_frame(f));
        labels.push_back(read_label_map(*f.silver));
        ids.push_back(f.index);
    }
    if (raw.empty()) throw InputError("sequence " + seq.name + " has no silver-truth masks");
    return extract_crops(raw, labels, size, ids);
}

std::vector<TexturePair> crop_pairs(const std::vector<CellCrop>& crops) {
    std::vector<TexturePair> out;
    for (const auto& c : crops)
        for (std::size_t z = 0; z < c.image.size(); ++z)
            if (foreground_area(c.mask[z]) > 0) out.push_back({c.image[z], c.mask[z]});
    return out;
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_hash(const fs::path& path) { return fnv1a_hex(read_bytes(path)); }

std::string config_hash(const nlohmann::json& config) { return fnv1a_hex(config.dump()); }

nlohmann::json write_synthetic_dataset(const std::vector<LabeledFrame>& frames, const fs::path& out_dir,
                                       const DatasetInfo& info) {
    if (frames.empty()) throw InputError("no frames to write");
    const fs::path raw_dir = out_dir / info.sequence;
    const fs::path seg_dir = out_dir / (info.sequence + "_ST") / "SEG";
    std::error_code ec;
    fs::create_directories(raw_dir, ec);
    if (!ec) fs::create_directories(seg_dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = "ctc";
    manifest["sequence"] = info.sequence;
    manifest["seed"] = info.seed;
    manifest["config"] = info.config;
    manifest["config_hash"] = config_hash(info.config);
    manifest["crop_normalization"] = "per-crop min-max";
    manifest["frames"] = nlohmann::json::array();
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto& f = frames[i];
        std::vector<Image16> raw_pages, label_pages;
        for (int z = 0; z < f.raw.depth; ++z) {
            raw_pages.push_back(to_uint16(f.raw.slice(z)));
            label_pages.push_back(f.labels.slice(z));
        }
        const fs::path raw_rel = fs::path(info.sequence) / frame_name("t", int(i));
        const fs::path seg_rel = fs::path(info.sequence + "_ST") / "SEG" / frame_name("man_seg", int(i));
        write_tiff(out_dir / raw_rel, raw_pages, 16);
        write_tiff(out_dir / seg_rel, label_pages, 16);
        manifest["frames"].push_back({{"index", i},
                                      {"width", f.raw.width},
                                      {"height", f.raw.height},
                                      {"depth", f.raw.depth},
                                      {"cells", f.placed},
                                      {"skipped", f.skipped},
                                      {"raw", raw_rel.generic_string()},
                                      {"raw_hash", file_hash(out_dir / raw_rel)},
                                      {"labels", seg_rel.generic_string()},
                                      {"labels_hash", file_hash(out_dir / seg_rel)}});
    }
    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
    if (!out) throw IoError("cannot write manifest in " + out_dir.string());
    return manifest;
}

nlohmann::json read_manifest(const fs::path& dir) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    if (!m.contains("frames")) throw ValidationError("manifest in " + dir.string() + " lists no frames");
    for (const auto& f : m["frames"])
        for (const char* key : {"raw", "labels"}) {
            const fs::path p = dir / f.at(key).get<std::string>();
            if (file_hash(p) != f.at(std::string(key) + "_hash").get<std::string>())
                throw ValidationError("content hash mismatch for " + p.string());
        }
    return m;
}

}  // namespace cellsynth
