#include "pipeline_config.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "cellsynth/common.hpp"

namespace cellsynth::pipeline {

namespace {

constexpr int kMaxInt = std::numeric_limits<int>::max();
constexpr double kInf = std::numeric_limits<double>::infinity();

class Reader {
public:
    explicit Reader(std::map<std::string, std::vector<std::string>> values) : values_(std::move(values)) {}

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    void get(const std::string& key, int& out, int lo, int hi = kMaxInt) {
        const std::string* s = scalar(key);
        if (!s) return;
        long long v = 0;
        const auto [end, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
        if (ec != std::errc() || end != s->data() + s->size())
            return fail(key, "expected an integer, got '" + *s + "'");
        if (v < lo || v > hi) return fail(key, "must be in [" + std::to_string(lo) + ", " + range_end(hi) + "], got " + *s);
        out = int(v);
    }

    void get(const std::string& key, std::uint64_t& out) {
        const std::string* s = scalar(key);
        if (!s) return;
        std::uint64_t v = 0;
        const auto [end, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
        if (ec != std::errc() || end != s->data() + s->size())
            return fail(key, "expected a non-negative integer, got '" + *s + "'");
        out = v;
    }

    void get(const std::string& key, double& out, double lo, double hi = kInf) {
        const std::string* s = scalar(key);
        if (!s) return;
        char* end = nullptr;
        const double v = std::strtod(s->c_str(), &end);
        if (s->empty() || end != s->c_str() + s->size() || !std::isfinite(v))
            return fail(key, "expected a finite number, got '" + *s + "'");
        if (v < lo || v > hi) {
            std::ostringstream os;
            os << "must be in [" << lo << ", " << hi << "], got " << *s;
            return fail(key, os.str());
        }
        out = v;
    }

    void get(const std::string& key, bool& out) {
        const std::string* s = scalar(key);
        if (!s) return;
        if (*s == "true") out = true;
        else if (*s == "false") out = false;
        else fail(key, "expected true or false, got '" + *s + "'");
    }

    void get(const std::string& key, std::string& out) {
        if (const std::string* s = scalar(key)) out = *s;
    }

    void get(const std::string& key, std::filesystem::path& out) {
        if (const std::string* s = scalar(key)) out = *s;
    }

    void fail(const std::string& key, const std::string& message) { errors_.push_back(key + ": " + message); }

    void finish() {
        for (const auto& [key, v] : values_)
            if (!used_.count(key)) fail(key, "unknown field");
        if (errors_.empty()) return;
        std::string msg = "invalid configuration:";
        for (const auto& e : errors_) msg += "\n  " + e;
        throw ValidationError(msg);
    }

private:
    static std::string range_end(int hi) { return hi == kMaxInt ? "inf" : std::to_string(hi); }

    const std::string* scalar(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end()) return nullptr;
        used_.insert(key);
        if (it->second.size() != 1) {
            fail(key, "expected a single value");
            return nullptr;
        }
        return &it->second[0];
    }

    std::map<std::string, std::vector<std::string>> values_;
    std::set<std::string> used_;
    std::vector<std::string> errors_;
};

std::map<std::string, std::vector<std::string>> flatten(const std::string& text) {
    std::istringstream in(text);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::Error& e) {
        throw ValidationError(std::string("malformed configuration: ") + e.what());
    }
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;  // section markers
        std::string key;
        for (const auto& p : item.parents) key += p + ".";
        key += item.name;
        if (out.count(key)) throw ValidationError("invalid configuration:\n  " + key + ": defined twice");
        out[key] = item.inputs;
    }
    return out;
}

}  // namespace

PipelineConfig parse_config(const std::string& toml) {
    Reader r(flatten(toml));
    PipelineConfig c;

    std::string mode;
    r.get("mode", mode);
    if (mode == "2D") c.mode = Mode::Planar;
    else if (mode == "3D") c.mode = Mode::Volumetric;
    else if (mode.empty()) r.fail("mode", "required (2D or 3D)");
    else r.fail("mode", "expected 2D or 3D, got '" + mode + "'");
    r.get("seed", c.seed);
    r.get("work_dir", c.work_dir);
    r.get("output_dir", c.output_dir);

    r.get("data.train", c.data.train);
    r.get("data.test", c.data.test);
    r.get("data.crop_size", c.data.crop_size, 8, 1024);
    r.get("data.toy_frames", c.data.toy_frames, 1);
    r.get("data.toy_cells_per_frame", c.data.toy_cells_per_frame, 1);
    r.get("data.toy_frame_size", c.data.toy_frame_size, 16);

    r.get("diffusion.timesteps", c.diffusion.timesteps, 2, 100000);
    r.get("diffusion.inference_steps", c.diffusion.inference_steps, 1);
    r.get("diffusion.eta", c.diffusion.eta, 0.0, 1.0);

    r.get("mask_ddpm.steps", c.mask_ddpm.steps, 0);
    r.get("mask_ddpm.batch_size", c.mask_ddpm.batch_size, 1);
    r.get("mask_ddpm.learning_rate", c.mask_ddpm.learning_rate, 1e-8, 1.0);
    r.get("mask_ddpm.base_channels", c.mask_ddpm.base_channels, 4);
    r.get("mask_ddpm.count", c.mask_ddpm.count, 1);

    r.get("shapes.order", c.shapes.order, 0, 20);
    r.get("shapes.degree", c.shapes.degree, 0, 20);
    r.get("shapes.count", c.shapes.count, 1);
    r.get("shapes.voxel_resolution", c.shapes.voxel_resolution, 8, 512);

    r.get("multiview.steps", c.multiview.steps, 0);
    r.get("multiview.batch_size", c.multiview.batch_size, 1);
    r.get("multiview.learning_rate", c.multiview.learning_rate, 1e-8, 1.0);
    r.get("multiview.base_channels", c.multiview.base_channels, 4);
    r.get("multiview.guidance_scale", c.multiview.guidance_scale, 0.0);

    r.get("reconstruct.iterations", c.reconstruct.iterations, 0);
    r.get("reconstruct.rays", c.reconstruct.rays, 1);
    r.get("reconstruct.samples", c.reconstruct.samples, 2);
    r.get("reconstruct.learning_rate", c.reconstruct.learning_rate, 1e-8, 1.0);

    r.get("texture.rho", c.texture.rho, 0.0);
    r.get("texture.pretrain_steps", c.texture.pretrain_steps, 0);
    r.get("texture.finetune_steps", c.texture.finetune_steps, 0);
    r.get("texture.batch_size", c.texture.batch_size, 1);
    r.get("texture.learning_rate", c.texture.learning_rate, 1e-8, 1.0);
    r.get("texture.base_channels", c.texture.base_channels, 4);
    r.get("texture.guidance_scale", c.texture.guidance_scale, 0.0);

    r.get("population.clustering_probability", c.population.clustering_probability, 0.0, 1.0);
    r.get("population.radius", c.population.radius, 0);
    r.get("population.max_attempts", c.population.max_attempts, 1);
    r.get("population.cells", c.population.cells, 0);
    r.get("population.frames", c.population.frames, 1);
    r.get("population.width", c.population.width, 1);
    r.get("population.height", c.population.height, 1);
    r.get("population.noise_sigma", c.population.noise_sigma, 0.0);

    r.get("ablation.use_sh_volumes_directly", c.ablation.use_sh_volumes_directly);
    r.get("ablation.texture_from_scratch", c.ablation.texture_from_scratch);

    r.get("evaluate.feature_side", c.evaluate.feature_side, 1, 256);

    // Fields that only exist for volumetric data: N, S, D and the canvas depth.
    const std::vector<std::pair<std::string, int*>> volumetric_fields{
        {"multiview.views", &c.multiview.views},
        {"texture.slices", &c.texture.slices},
        {"reconstruct.resolution", &c.reconstruct.resolution},
        {"population.depth", &c.population.depth}};
    for (const auto& [key, field] : volumetric_fields) {
        if (c.volumetric() && !r.has(key)) r.fail(key, "required in 3D mode");
        if (!c.volumetric() && r.has(key)) r.fail(key, "only valid in 3D mode");
        r.get(key, *field, key == "reconstruct.resolution" ? 8 : 1, key == "reconstruct.resolution" ? 512 : kMaxInt);
    }

    if (c.diffusion.inference_steps > c.diffusion.timesteps)
        r.fail("diffusion.inference_steps", "must not exceed diffusion.timesteps");
    if (c.shapes.degree > c.shapes.order) r.fail("shapes.degree", "must not exceed shapes.order");
    if (c.volumetric() && c.population.depth > 0 && c.texture.slices > c.population.depth)
        r.fail("population.depth", "must be at least texture.slices");
    if (c.data.crop_size > std::min(c.population.width, c.population.height))
        r.fail("data.crop_size", "must fit inside the population canvas");
    if (c.data.train.empty() && c.data.toy_frame_size < c.data.crop_size)
        r.fail("data.toy_frame_size", "must be at least data.crop_size");
    if (!c.volumetric() && c.ablation.use_sh_volumes_directly)
        r.fail("ablation.use_sh_volumes_directly", "only valid in 3D mode");
    r.finish();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read configuration " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config(os.str());
}

nlohmann::json to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["mode"] = c.volumetric() ? "3D" : "2D";
    j["seed"] = c.seed;
    j["work_dir"] = c.work_dir.generic_string();
    j["output_dir"] = c.output_dir.generic_string();
    j["data"] = {{"train", c.data.train.generic_string()},
                 {"test", c.data.test.generic_string()},
                 {"crop_size", c.data.crop_size},
                 {"toy_frames", c.data.toy_frames},
                 {"toy_cells_per_frame", c.data.toy_cells_per_frame},
                 {"toy_frame_size", c.data.toy_frame_size}};
    j["diffusion"] = {{"timesteps", c.diffusion.timesteps},
                      {"inference_steps", c.diffusion.inference_steps},
                      {"eta", c.diffusion.eta}};
    j["mask_ddpm"] = {{"steps", c.mask_ddpm.steps},
                      {"batch_size", c.mask_ddpm.batch_size},
                      {"learning_rate", c.mask_ddpm.learning_rate},
                      {"base_channels", c.mask_ddpm.base_channels},
                      {"count", c.mask_ddpm.count}};
    j["texture"] = {{"rho", c.texture.rho},
                    {"pretrain_steps", c.texture.pretrain_steps},
                    {"finetune_steps", c.texture.finetune_steps},
                    {"batch_size", c.texture.batch_size},
                    {"learning_rate", c.texture.learning_rate},
                    {"base_channels", c.texture.base_channels},
                    {"guidance_scale", c.texture.guidance_scale}};
    j["population"] = {{"clustering_probability", c.population.clustering_probability},
                       {"radius", c.population.radius},
                       {"max_attempts", c.population.max_attempts},
                       {"cells", c.population.cells},
                       {"frames", c.population.frames},
                       {"width", c.population.width},
                       {"height", c.population.height},
                       {"noise_sigma", c.population.noise_sigma}};
    j["ablation"] = {{"use_sh_volumes_directly", c.ablation.use_sh_volumes_directly},
                     {"texture_from_scratch", c.ablation.texture_from_scratch}};
    j["evaluate"] = {{"feature_side", c.evaluate.feature_side}};
    if (c.volumetric()) {
        j["shapes"] = {{"order", c.shapes.order},
                       {"degree", c.shapes.degree},
                       {"count", c.shapes.count},
                       {"voxel_resolution", c.shapes.voxel_resolution}};
        j["multiview"] = {{"views", c.multiview.views},
                          {"steps", c.multiview.steps},
                          {"batch_size", c.multiview.batch_size},
                          {"learning_rate", c.multiview.learning_rate},
                          {"base_channels", c.multiview.base_channels},
                          {"guidance_scale", c.multiview.guidance_scale}};
        j["reconstruct"] = {{"resolution", c.reconstruct.resolution},
                            {"iterations", c.reconstruct.iterations},
                            {"rays", c.reconstruct.rays},
                            {"samples", c.reconstruct.samples},
                            {"learning_rate", c.reconstruct.learning_rate}};
        j["texture"]["slices"] = c.texture.slices;
        j["population"]["depth"] = c.population.depth;
    }
    return j;
}

std::string toy_config_text(Mode mode) {
    const bool vol = mode == Mode::Volumetric;
    std::ostringstream os;
    os << "mode = \"" << (vol ? "3D" : "2D") << "\"\n"
       << "seed = 7\n"
       << "work_dir = \"work\"\n"
       << "output_dir = \"synthetic\"\n\n"
       << "[data]\n"
       << "crop_size = 32\n"
       << "toy_frames = 2\n"
       << "toy_cells_per_frame = 8\n"
       << "toy_frame_size = 96\n\n"
       << "[diffusion]\n"
       << "timesteps = 1000\n"
       << "inference_steps = 20\n\n"
       << "[mask_ddpm]\n"
       << "steps = 300\n"
       << "batch_size = 8\n"
       << "base_channels = 8\n"
       << "count = 6\n\n";
    if (vol)
        os << "[shapes]\n"
           << "order = 5\n"
           << "degree = 3\n"
           << "count = 8\n"
           << "voxel_resolution = 32\n\n"
           << "[multiview]\n"
           << "views = 8\n"
           << "steps = 150\n"
           << "batch_size = 2\n"
           << "base_channels = 8\n\n"
           << "[reconstruct]\n"
           << "resolution = 32\n"
           << "iterations = 150\n"
           << "rays = 128\n"
           << "samples = 32\n\n";
    os << "[texture]\n";
    if (vol) os << "slices = 5\n";
    os << "rho = 0.7\n"
       << "pretrain_steps = 200\n"
       << "finetune_steps = 200\n"
       << "batch_size = 8\n"
       << "base_channels = 8\n\n"
       << "[population]\n"
       << "clustering_probability = 0.5\n"
       << "radius = 10\n"
       << "cells = 6\n"
       << "frames = 2\n"
       << "width = 96\n"
       << "height = 96\n";
    if (vol) os << "depth = 8\n";
    os << "\n[ablation]\n"
       << "use_sh_volumes_directly = false\n"
       << "texture_from_scratch = false\n";
    return os.str();
}

}  // namespace cellsynth::pipeline
