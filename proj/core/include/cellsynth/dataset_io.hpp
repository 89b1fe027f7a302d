#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "cellsynth/common.hpp"
#include "cellsynth/population.hpp"
#include "cellsynth/texture_diffusion.hpp"

namespace cellsynth {

/// One time point of a Cell Tracking Challenge sequence.
struct CTCFrame {
    int index = 0;
    std::filesystem::path raw;
    std::optional<std::filesystem::path> silver;
    /// Gold annotations may be sparse, and for 3D may cover single z-slices (man_seg_TTT_ZZZ.tif).
    std::vector<std::filesystem::path> gold;
};

struct CTCSequence {
    std::filesystem::path directory;
    std::string name;
    std::vector<CTCFrame> frames;

    std::size_t annotated_frames() const;
};

/// Indexes `{dir}/t{NNN}.tif` with silver masks from `{dir}_ST/SEG` and gold masks from `{dir}_GT/SEG`.
CTCSequence load_sequence(const std::filesystem::path& directory);

/// Raw intensities as stored (no rescaling); one z-slice per TIFF page.
Volume<float> read_raw_frame(const CTCFrame& frame);
LabelMap read_label_map(const std::filesystem::path& path);

struct CellCrop {
    /// One image per z-slice, min-max normalised to [0, 1] per crop.
    std::vector<GrayImage> image;
    /// The source instance only, per slice.
    std::vector<MaskImage> mask;
    int frame = 0;
    int instance = 0;
    /// Frame coordinates of the crop's top-left pixel; may be negative at the border.
    int origin_x = 0;
    int origin_y = 0;
};

struct CropSkip {
    int frame = 0;
    int instance = 0;
    std::string reason;
};

struct CropExtraction {
    std::vector<CellCrop> crops;
    std::vector<CropSkip> skipped;
};

/// One crop per silver-truth instance, centred on its xy centroid. Pixels outside the frame take the
/// median background intensity. Instances whose bounding box exceeds the crop are skipped.
CropExtraction extract_crops(const CTCSequence& seq, int size = 128);
/// Crops from in-memory frames; `frame_ids` label the results.
CropExtraction extract_crops(const std::vector<Volume<float>>& raw, const std::vector<LabelMap>& labels, int size,
                             const std::vector<int>& frame_ids = {});

/// Image/mask pairs for 2D training: every slice of every crop where the instance is present.
std::vector<TexturePair> crop_pairs(const std::vector<CellCrop>& crops);

/// FNV-1a 64-bit, as 16 lower-case hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);
/// Hash of the canonical (key-sorted, compact) serialisation.
std::string config_hash(const nlohmann::json& config);

struct DatasetInfo {
    std::string sequence = "01";
    std::uint64_t seed = 0;
    nlohmann::json config = nlohmann::json::object();
};

/// Writes raw frames as 16-bit TIFF (values in [0,1] scaled to 0..65535) and labels as 16-bit
/// `man_seg` TIFF into `{out}/{seq}` and `{out}/{seq}_ST/SEG`, plus `{out}/manifest.json`.
nlohmann::json write_synthetic_dataset(const std::vector<LabeledFrame>& frames, const std::filesystem::path& out_dir,
                                       const DatasetInfo& info = {});

/// Reads a manifest and checks every listed file against its recorded hash.
nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace cellsynth
