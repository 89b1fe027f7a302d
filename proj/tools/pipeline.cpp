#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <spdlog/spdlog.h>

#include "cellsynth/dataset_io.hpp"
#include "cellsynth/image_io.hpp"
#include "cellsynth/mask_ddpm.hpp"
#include "cellsynth/multiview_diffusion.hpp"
#include "cellsynth/population.hpp"
#include "cellsynth/shape_library.hpp"
#include "cellsynth/surface_recon.hpp"
#include "cellsynth/texture_diffusion.hpp"
#include "cellsynth/toy.hpp"

namespace cellsynth::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string numbered(int i, const char* suffix = "") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d%s", i, suffix);
    return buf;
}

fs::path work(const PipelineConfig& c, const char* name) { return c.work_dir / name; }

fs::path fresh_dir(const fs::path& p) {
    std::error_code ec;
    fs::remove_all(p, ec);
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
    return p;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p, std::ios::binary);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + p.string());
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("malformed " + p.string() + ": " + e.what());
    }
}

/// Sorted listing of the regular files under `dir` whose names end with `suffix`.
std::vector<fs::path> files_in(const fs::path& dir, const std::string& suffix) {
    std::vector<fs::path> out;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && name.size() >= suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<fs::path> subdirs(const fs::path& dir) {
    std::vector<fs::path> out;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

json hash_tree(const PipelineConfig& c, const std::vector<fs::path>& roots) {
    json out = json::object();
    for (const auto& root : roots) {
        std::error_code ec;
        if (fs::is_regular_file(root, ec)) {
            out[fs::relative(root, c.work_dir).generic_string()] = file_hash(root);
            continue;
        }
        if (!fs::is_directory(root, ec)) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const fs::path base = f.lexically_relative(c.work_dir);
            out[(base.empty() || *base.begin() == ".." ? f : base).generic_string()] = file_hash(f);
        }
    }
    return out;
}

void write_gray_stack(const fs::path& p, const std::vector<GrayImage>& slices) {
    std::vector<Image16> pages;
    for (const auto& s : slices) pages.push_back(to_uint16(s));
    write_tiff(p, pages, 16);
}

std::vector<GrayImage> read_gray_stack(const fs::path& p) {
    std::vector<GrayImage> out;
    for (const auto& page : read_tiff(p)) out.push_back(from_uint16(page));
    return out;
}

TrainOptions train_options(int steps, int batch, double lr, std::uint64_t seed) {
    TrainOptions o;
    o.steps = steps;
    o.batch_size = batch;
    o.learning_rate = lr;
    o.seed = seed;
    o.on_step = [steps](int step, double loss) {
        if ((step + 1) % 100 == 0 || step + 1 == steps) spdlog::debug("step {}/{} loss {:.4f}", step + 1, steps, loss);
    };
    return o;
}

json loss_summary(const TrainingLog& log) {
    if (log.losses.empty()) return {{"steps", 0}};
    const int n = std::max(1, int(log.losses.size()) / 10);
    return {{"steps", log.losses.size()}, {"initial_loss", log.head_mean(n)}, {"final_loss", log.tail_mean(n)}};
}

SamplerConfig sampler(const PipelineConfig& c, double guidance, std::uint64_t seed) {
    SamplerConfig s;
    s.num_inference_steps = c.diffusion.inference_steps;
    s.eta = c.diffusion.eta;
    s.guidance_scale = guidance;
    s.seed = seed;
    return s;
}

DiffusionSchedule schedule(const PipelineConfig& c) { return DiffusionSchedule::linear(c.diffusion.timesteps); }

nn::UNetConfig small_unet(int base_channels) {
    nn::UNetConfig u;
    u.base_channels = base_channels;
    return u;
}

// ---- geometry helpers for moving masks in and out of the shape frame ----

struct Footprint {
    double cx = 0, cy = 0, radius = 0;
};

Footprint footprint(const MaskImage& m) {
    Footprint f;
    double n = 0;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y)) {
                f.cx += x + 0.5;
                f.cy += y + 0.5;
                n += 1;
            }
    if (n == 0) return f;
    f.cx /= n;
    f.cy /= n;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y)) f.radius = std::max(f.radius, std::hypot(x + 0.5 - f.cx, y + 0.5 - f.cy) + 0.5);
    return f;
}

/// Nearest-neighbour resampling that scales by k about (sx, sy) and moves that point to (dx, dy).
MaskImage resample(const MaskImage& m, double k, double sx, double sy, double dx, double dy) {
    MaskImage out(m.width, m.height);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            const int u = int(std::floor((x + 0.5 - dx) / k + sx)), v = int(std::floor((y + 0.5 - dy) / k + sy));
            if (m.contains(u, v)) out.at(x, y) = m.at(u, v);
        }
    return out;
}

MaskImage projection(const std::vector<MaskImage>& slices) {
    MaskImage out(slices.at(0).width, slices.at(0).height);
    for (const auto& s : slices)
        for (std::size_t i = 0; i < s.pixels.size(); ++i) out.pixels[i] |= s.pixels[i];
    return out;
}

// ---- toy corpus standing in for a real annotated sequence ----

std::vector<CellSample> toy_cells(const PipelineConfig& c, int count, std::uint64_t seed) {
    std::vector<CellSample> out;
    const int side = c.data.crop_size;
    if (!c.volumetric()) {
        for (auto& p : toy::cell_pairs(count, side, seed)) {
            CellSample s;
            s.texture.slices.push_back(p.image);
            s.mask.slices.push_back(p.mask);
            s.mask.z.push_back(0.5);
            out.push_back(std::move(s));
        }
        return out;
    }
    for (int i = 0; i < count; ++i) {
        const auto shape = generate_sh_shape(derive_seed(seed, "toy-shape", std::uint64_t(i)), c.shapes.order,
                                             c.shapes.degree);
        Rng rng(derive_seed(seed, "toy-texture", std::uint64_t(i)));
        CellSample s;
        s.mask = slice_volume(voxelize(shape, side), c.texture.slices, side / 2, side / 2);
        for (const auto& m : s.mask.slices) s.texture.slices.push_back(toy::cell_texture(m, rng));
        out.push_back(std::move(s));
    }
    return out;
}

float background_of(const std::vector<CellSample>& cells) {
    std::vector<TexturePair> pairs;
    for (const auto& c : cells)
        for (std::size_t z = 0; z < c.mask.slices.size(); ++z) pairs.push_back({c.texture.slices[z], c.mask.slices[z]});
    return estimate_background(pairs);
}

std::vector<CellSample> rotated(const std::vector<CellSample>& cells, std::size_t offset) {
    std::vector<CellSample> out;
    for (std::size_t i = 0; i < cells.size(); ++i) out.push_back(cells[(offset + i) % cells.size()]);
    return out;
}

void write_toy_sequence(const PipelineConfig& c, const fs::path& dir, const std::string& seq, std::uint64_t seed) {
    const int per_frame = c.data.toy_cells_per_frame;
    const auto cells = toy_cells(c, per_frame * c.data.toy_frames, seed);
    CanvasSpec canvas{c.data.toy_frame_size, c.data.toy_frame_size, c.canvas_depth(), background_of(cells), 0.02};
    PlacementPolicy policy;
    policy.clustering_probability = c.population.clustering_probability;
    policy.neighborhood_radius = c.population.radius;
    policy.max_attempts = c.population.max_attempts;
    policy.target_count = per_frame;
    std::vector<LabeledFrame> frames;
    for (int f = 0; f < c.data.toy_frames; ++f)
        frames.push_back(synthesize_population(rotated(cells, std::size_t(f * per_frame)), canvas, policy,
                                               derive_seed(seed, "toy-frame", std::uint64_t(f))));
    DatasetInfo info;
    info.sequence = seq;
    info.seed = seed;
    write_synthetic_dataset(frames, dir, info);
}

fs::path train_sequence(const PipelineConfig& c) {
    return c.data.train.empty() ? work(c, "real") / "train" / "01" : c.data.train;
}

fs::path test_sequence(const PipelineConfig& c) {
    if (c.data.train.empty()) return work(c, "real") / "test" / "02";
    if (c.data.test.empty()) {
        spdlog::warn("data.test is not set; evaluating against the training sequence");
        return c.data.train;
    }
    return c.data.test;
}

// ---- stages ----

using Outputs = std::pair<std::vector<fs::path>, json>;

Outputs prepare_crops(const PipelineConfig& c) {
    std::vector<fs::path> roots;
    if (c.data.train.empty()) {
        fresh_dir(work(c, "real"));
        write_toy_sequence(c, work(c, "real") / "train", "01", stage_seed(c, "toy-real", 0));
        write_toy_sequence(c, work(c, "real") / "test", "02", stage_seed(c, "toy-real", 1));
        roots.push_back(work(c, "real"));
    }
    const auto seq = load_sequence(train_sequence(c));
    const auto ex = extract_crops(seq, c.data.crop_size);
    if (ex.crops.empty()) throw InputError("no usable cell crops in " + seq.directory.string());
    const fs::path root = fresh_dir(work(c, "crops"));
    fresh_dir(root / "masks");
    fresh_dir(root / "pairs");
    std::vector<double> radii;
    for (std::size_t i = 0; i < ex.crops.size(); ++i) {
        const auto proj = projection(ex.crops[i].mask);
        write_mask_png(root / "masks" / numbered(int(i), ".png"), proj);
        radii.push_back(footprint(proj).radius);
    }
    const auto pairs = crop_pairs(ex.crops);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        write_gray_stack(root / "pairs" / numbered(int(i), "_image.tif"), {pairs[i].image});
        write_mask_png(root / "pairs" / numbered(int(i), "_mask.png"), pairs[i].mask);
    }
    std::nth_element(radii.begin(), radii.begin() + std::ptrdiff_t(radii.size() / 2), radii.end());
    json meta{{"sequence", seq.directory.generic_string()},
              {"crops", ex.crops.size()},
              {"pairs", pairs.size()},
              {"skipped", ex.skipped.size()},
              {"background", estimate_background(pairs)},
              {"median_radius", radii[radii.size() / 2]},
              {"normalization", "per-crop min-max"}};
    write_json(root / "meta.json", meta);
    roots.push_back(root);
    return {roots, meta};
}

std::vector<MaskImage> read_masks(const fs::path& dir) {
    std::vector<MaskImage> out;
    for (const auto& p : files_in(dir, ".png")) out.push_back(read_mask_png(p));
    return out;
}

std::vector<TexturePair> read_pairs(const PipelineConfig& c) {
    std::vector<TexturePair> out;
    for (const auto& p : files_in(work(c, "crops") / "pairs", "_image.tif")) {
        std::string mask = p.filename().string();
        mask.replace(mask.find("_image.tif"), std::string::npos, "_mask.png");
        out.push_back({read_gray_stack(p).at(0), read_mask_png(p.parent_path() / mask)});
    }
    if (out.empty()) throw InputError("no training crops in " + (work(c, "crops") / "pairs").string());
    return out;
}

Outputs train_mask_ddpm(const PipelineConfig& c) {
    const auto corpus = read_masks(work(c, "crops") / "masks");
    MaskModelConfig mc;
    mc.image_size = c.data.crop_size;
    mc.unet = small_unet(c.mask_ddpm.base_channels);
    MaskModel model(mc, schedule(c), stage_seed(c, "mask-init"));
    const auto log = train_mask_model(
        model, corpus,
        train_options(c.mask_ddpm.steps, c.mask_ddpm.batch_size, c.mask_ddpm.learning_rate, stage_seed(c, "train-mask-ddpm")));
    fs::create_directories(work(c, "models"));
    const fs::path out = work(c, "models") / "mask.ckpt";
    model.save(out);
    return {{out}, loss_summary(log)};
}

Outputs gen_masks(const PipelineConfig& c) {
    const auto model = MaskModel::load(work(c, "models") / "mask.ckpt");
    MaskGenerationStats stats;
    const auto masks = generate_masks(model, c.mask_ddpm.count, sampler(c, 1.0, stage_seed(c, "gen-masks")), {}, &stats);
    const fs::path dir = fresh_dir(work(c, "masks"));
    for (std::size_t i = 0; i < masks.size(); ++i) write_mask_png(dir / numbered(int(i), ".png"), masks[i]);
    return {{dir},
            {{"masks", masks.size()},
             {"samples_drawn", stats.samples_drawn},
             {"single_component", stats.single_component},
             {"rejected_empty", stats.rejected_empty}}};
}

ShapeCorpusOptions corpus_options(const PipelineConfig& c) {
    ShapeCorpusOptions o;
    o.order = c.shapes.order;
    o.degree = c.shapes.degree;
    o.views = c.multiview.views;
    o.view_size = c.data.crop_size;
    o.voxel_resolution = c.shapes.voxel_resolution;
    return o;
}

Outputs build_shape_corpus(const PipelineConfig& c) {
    const fs::path dir = fresh_dir(work(c, "shapes"));
    const auto opts = corpus_options(c);
    for (int i = 0; i < c.shapes.count; ++i)
        save_shape_record(dir / numbered(i), make_shape_record(stage_seed(c, "build-shape-corpus", std::uint64_t(i)), opts));
    return {{dir}, {{"shapes", c.shapes.count}}};
}

MultiviewModelConfig multiview_config(const PipelineConfig& c) {
    MultiviewModelConfig mc;
    mc.views = c.multiview.views;
    mc.image_size = c.data.crop_size;
    mc.unet.base_channels = c.multiview.base_channels;
    return mc;
}

Outputs train_multiview(const PipelineConfig& c) {
    const auto corpus = load_shape_corpus(work(c, "shapes"));
    MultiviewModel model(multiview_config(c), schedule(c), stage_seed(c, "multiview-init"));
    const auto log = train_multiview_model(
        model, corpus,
        train_options(c.multiview.steps, c.multiview.batch_size, c.multiview.learning_rate, stage_seed(c, "train-multiview")));
    fs::create_directories(work(c, "models"));
    const fs::path out = work(c, "models") / "multiview.ckpt";
    model.save(out);
    return {{out}, loss_summary(log)};
}

Outputs gen_views(const PipelineConfig& c) {
    const auto model = MultiviewModel::load(work(c, "models") / "multiview.ckpt", c.multiview.views);
    const auto masks = read_masks(work(c, "masks"));
    const fs::path dir = fresh_dir(work(c, "views"));
    const int side = c.data.crop_size;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        // Condition on the mask scaled to the shape frame, where the unit ball spans 0.45 of the view.
        const auto fp = footprint(masks[i]);
        const double k = kGridFill * side / fp.radius;
        const auto condition = resample(masks[i], k, fp.cx, fp.cy, 0.5 * side, 0.5 * side);
        const auto sample = sample_views(model, condition, c.multiview.views,
                                         sampler(c, c.multiview.guidance_scale, stage_seed(c, "gen-views", i)));
        const fs::path obj = fresh_dir(dir / numbered(int(i)));
        json poses = json::array();
        for (std::size_t v = 0; v < sample.views.views.size(); ++v) {
            write_mask_png(obj / numbered(int(v), ".png"), sample.views.views[v]);
            const auto& p = sample.views.poses[v];
            poses.push_back({p.azimuth, p.elevation, p.distance});
        }
        write_json(obj / "meta.json", {{"scale", k}, {"poses", poses}});
    }
    return {{dir}, {{"objects", masks.size()}}};
}

Outputs reconstruct(const PipelineConfig& c) {
    const fs::path dir = fresh_dir(work(c, "volumes"));
    int ok = 0, failed = 0;
    for (const auto& obj : subdirs(work(c, "views"))) {
        const json meta = read_json(obj / "meta.json");
        ViewSet views;
        views.views = read_masks(obj);
        for (const auto& p : meta.at("poses")) views.poses.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
        SdfFitOptions o;
        o.iterations = c.reconstruct.iterations;
        o.rays_per_iteration = c.reconstruct.rays;
        o.samples_per_ray = c.reconstruct.samples;
        o.learning_rate = c.reconstruct.learning_rate;
        o.seed = stage_seed(c, "reconstruct", std::uint64_t(ok + failed));
        const std::string name = obj.filename().string();
        try {
            const auto volume = extract_volume(fit_sdf(views, o), c.reconstruct.resolution);
            std::vector<MaskImage> slices;
            for (int z = 0; z < volume.depth; ++z) slices.push_back(volume.slice(z));
            write_mask_stack(dir / (name + ".tif"), slices);
            write_json(dir / (name + ".json"), {{"scale", meta.at("scale")}});
            ++ok;
        } catch (const Error& e) {
            if (e.category() == ErrorCategory::Contract) throw;
            spdlog::warn("object {}: reconstruction skipped ({})", name, e.what());
            ++failed;
        }
    }
    if (ok == 0) throw ReconstructionFailure("no object could be reconstructed");
    return {{dir}, {{"reconstructed", ok}, {"failed", failed}}};
}

VoxelVolume read_volume(const fs::path& p) {
    const auto slices = read_mask_stack(p);
    VoxelVolume v(slices.at(0).width, slices.at(0).height, int(slices.size()));
    for (int z = 0; z < v.depth; ++z) v.set_slice(z, slices[std::size_t(z)]);
    return v;
}

Outputs slice_stage(const PipelineConfig& c) {
    const fs::path dir = fresh_dir(work(c, "slices"));
    const int side = c.data.crop_size;
    const double half = 0.5 * side;
    auto emit = [&](int i, const VoxelVolume& volume, double k) {
        const auto stack = slice_volume(volume, c.texture.slices, side, side);
        std::vector<MaskImage> slices;
        for (const auto& s : stack.slices) slices.push_back(resample(s, 1.0 / k, half, half, half, half));
        write_mask_stack(dir / numbered(i, ".tif"), slices);
    };
    int count = 0;
    if (c.ablation.use_sh_volumes_directly) {
        // Shapes straight from the harmonic prior, scaled to the typical real cell size.
        const double k = kGridFill * side / read_json(work(c, "crops") / "meta.json").at("median_radius").get<double>();
        for (; count < c.mask_ddpm.count; ++count) {
            const auto shape = generate_sh_shape(stage_seed(c, "slice-shape", std::uint64_t(count)), c.shapes.order,
                                                 c.shapes.degree);
            emit(count, voxelize(shape, c.reconstruct.resolution), k);
        }
    } else {
        for (const auto& p : files_in(work(c, "volumes"), ".tif")) {
            fs::path meta = p;
            meta.replace_extension(".json");
            emit(count++, read_volume(p), read_json(meta).at("scale").get<double>());
        }
    }
    return {{dir}, {{"cells", count}}};
}

TextureModelConfig texture_config(const PipelineConfig& c) {
    TextureModelConfig tc;
    tc.image_size = c.data.crop_size;
    tc.unet = small_unet(c.texture.base_channels);
    return tc;
}

Outputs pretrain_base_stage(const PipelineConfig& c) {
    const auto pairs = read_pairs(c);
    std::vector<GrayImage> corpus;
    for (const auto& p : pairs) corpus.push_back(p.image);
    TextureBase base(texture_config(c), schedule(c), stage_seed(c, "texture-base-init"));
    const auto log = pretrain_base(
        base, corpus,
        train_options(c.texture.pretrain_steps, c.texture.batch_size, c.texture.learning_rate, stage_seed(c, "pretrain-base")));
    fs::create_directories(work(c, "models"));
    const fs::path out = work(c, "models") / "texture_base.ckpt";
    base.save(out);
    return {{out}, loss_summary(log)};
}

Outputs finetune_texture(const PipelineConfig& c) {
    const auto pairs = read_pairs(c);
    const bool scratch = c.ablation.texture_from_scratch;
    const TextureBase base = scratch ? TextureBase(texture_config(c), schedule(c), stage_seed(c, "texture-base-init"))
                                     : TextureBase::load(work(c, "models") / "texture_base.ckpt");
    auto result = finetune_conditional(
        base, pairs,
        train_options(c.texture.finetune_steps, c.texture.batch_size, c.texture.learning_rate, stage_seed(c, "finetune-texture")),
        scratch);
    fs::create_directories(work(c, "models"));
    const fs::path out = work(c, "models") / "texture.ckpt";
    result.model.save(out);
    json summary = loss_summary(result.log);
    summary["from_scratch"] = scratch;
    return {{out}, summary};
}

std::vector<MaskStack> cell_masks(const PipelineConfig& c) {
    std::vector<MaskStack> out;
    auto add = [&](std::vector<MaskImage> slices) {
        MaskStack s;
        for (std::size_t z = 0; z < slices.size(); ++z) s.z.push_back(double(z) + 0.5);
        s.slices = std::move(slices);
        out.push_back(std::move(s));
    };
    if (c.volumetric())
        for (const auto& p : files_in(work(c, "slices"), ".tif")) add(read_mask_stack(p));
    else
        for (auto& m : read_masks(work(c, "masks"))) add({m});
    if (out.empty()) throw InputError("no cell masks to texture");
    return out;
}

Outputs gen_textures(const PipelineConfig& c) {
    const auto model = ConditionalTextureModel::load(work(c, "models") / "texture.ckpt");
    const auto masks = cell_masks(c);
    const fs::path dir = fresh_dir(work(c, "textures"));
    const int side = c.data.crop_size;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const std::uint64_t seed = stage_seed(c, "gen-textures", i);
        const auto latents = make_correlated_latents(int(masks[i].slices.size()), c.texture.rho, {1, 1, side, side}, seed);
        // The correlated-latent construction needs the deterministic sampler, whatever eta the other stages use.
        SamplerConfig sc = sampler(c, c.texture.guidance_scale, seed);
        sc.eta = 0.0;
        const auto tex = generate_texture(model, masks[i], latents, sc);
        write_gray_stack(dir / numbered(int(i), "_image.tif"), tex.slices);
        write_mask_stack(dir / numbered(int(i), "_mask.tif"), masks[i].slices);
    }
    return {{dir}, {{"cells", masks.size()}}};
}

Outputs compose(const PipelineConfig& c) {
    std::vector<CellSample> cells;
    for (const auto& p : files_in(work(c, "textures"), "_image.tif")) {
        std::string mask = p.filename().string();
        mask.replace(mask.find("_image.tif"), std::string::npos, "_mask.tif");
        CellSample s;
        s.texture.slices = read_gray_stack(p);
        s.mask.slices = read_mask_stack(p.parent_path() / mask);
        for (std::size_t z = 0; z < s.mask.slices.size(); ++z) s.mask.z.push_back(double(z) + 0.5);
        if (std::any_of(s.mask.slices.begin(), s.mask.slices.end(), [](const MaskImage& m) { return foreground_area(m) > 0; }))
            cells.push_back(std::move(s));
    }
    if (cells.empty()) throw GenerationFailure("no textured cells to compose");
    const float background = read_json(work(c, "crops") / "meta.json").at("background").get<float>();
    CanvasSpec canvas{c.population.width, c.population.height, c.canvas_depth(), background, c.population.noise_sigma};
    PlacementPolicy policy;
    policy.clustering_probability = c.population.clustering_probability;
    policy.neighborhood_radius = c.population.radius;
    policy.max_attempts = c.population.max_attempts;
    policy.target_count = c.population.cells;
    std::vector<LabeledFrame> frames;
    json counts = json::array();
    for (int f = 0; f < c.population.frames; ++f) {
        frames.push_back(synthesize_population(rotated(cells, std::size_t(f) * std::size_t(c.population.cells)), canvas,
                                               policy, stage_seed(c, "compose", std::uint64_t(f))));
        counts.push_back(frames.back().placed);
    }
    DatasetInfo info;
    info.seed = c.seed;
    info.config = to_json(c);
    write_synthetic_dataset(frames, c.output_dir, info);
    return {{c.output_dir}, {{"frames", frames.size()}, {"cells_per_frame", counts}, {"output", c.output_dir.generic_string()}}};
}

Outputs evaluate_stage(const PipelineConfig& c) {
    EvaluationRequest req;
    req.real = test_sequence(c);
    req.synthetic = c.output_dir / "01";
    if (c.data.train.empty() || !c.data.test.empty()) req.real_reference = train_sequence(c);
    const auto records = evaluate(c, req);
    const fs::path dir = fresh_dir(work(c, "eval"));
    std::ofstream(dir / "metrics.tsv") << format_records(records);
    std::ofstream(dir / "metrics.txt") << format_table(records);
    json summary = json::object();
    for (const auto& r : records) summary[r.metric] = r.value;
    return {{dir}, summary};
}

Outputs dispatch(const std::string& stage, const PipelineConfig& c) {
    if (stage == "prepare-crops") return prepare_crops(c);
    if (stage == "train-mask-ddpm") return train_mask_ddpm(c);
    if (stage == "gen-masks") return gen_masks(c);
    if (stage == "build-shape-corpus") return build_shape_corpus(c);
    if (stage == "train-multiview") return train_multiview(c);
    if (stage == "gen-views") return gen_views(c);
    if (stage == "reconstruct") return reconstruct(c);
    if (stage == "slice") return slice_stage(c);
    if (stage == "pretrain-base") return pretrain_base_stage(c);
    if (stage == "finetune-texture") return finetune_texture(c);
    if (stage == "gen-textures") return gen_textures(c);
    if (stage == "compose") return compose(c);
    if (stage == "evaluate") return evaluate_stage(c);
    throw ConfigurationError("unknown stage '" + stage + "'");
}

std::vector<GrayImage> crop_slices(const fs::path& sequence, int size) {
    std::vector<GrayImage> out;
    for (auto& p : crop_pairs(extract_crops(load_sequence(sequence), size).crops)) out.push_back(std::move(p.image));
    return out;
}

LabelMap read_labels_any(const fs::path& p) {
    std::error_code ec;
    if (!fs::is_directory(p, ec)) return read_label_map(p);
    // A directory of man_seg files is scored as one stacked volume, frame after frame.
    const auto files = files_in(p, ".tif");
    if (files.empty()) throw InputError("no label maps in " + p.string());
    LabelMap out;
    for (const auto& f : files) {
        auto m = read_label_map(f);
        if (out.voxels.empty()) out = LabelMap(m.width, m.height, 0);
        if (m.width != out.width || m.height != out.height) throw InputError("label maps differ in size in " + p.string());
        out.voxels.insert(out.voxels.end(), m.voxels.begin(), m.voxels.end());
        out.depth += m.depth;
    }
    return out;
}

}  // namespace

std::uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage, std::uint64_t index) {
    return derive_seed(cfg.seed, stage, index);
}

const std::vector<std::string>& all_stages() {
    static const std::vector<std::string> stages{
        "prepare-crops", "train-mask-ddpm", "gen-masks",        "build-shape-corpus", "train-multiview",
        "gen-views",     "reconstruct",     "slice",            "pretrain-base",      "finetune-texture",
        "gen-textures",  "compose",         "evaluate"};
    return stages;
}

std::vector<std::string> stages_for(const PipelineConfig& cfg) {
    static const std::vector<std::string> volumetric_only{"build-shape-corpus", "train-multiview", "gen-views",
                                                          "reconstruct", "slice"};
    // Without the multiview branch the generated masks feed nothing, so their stages go too.
    static const std::vector<std::string> shape_ablation_skips{"train-mask-ddpm", "gen-masks", "build-shape-corpus",
                                                               "train-multiview", "gen-views", "reconstruct"};
    auto contains = [](const std::vector<std::string>& v, const std::string& s) {
        return std::find(v.begin(), v.end(), s) != v.end();
    };
    std::vector<std::string> out;
    for (const auto& s : all_stages()) {
        if (!cfg.volumetric() && contains(volumetric_only, s)) continue;
        if (cfg.volumetric() && cfg.ablation.use_sh_volumes_directly && contains(shape_ablation_skips, s)) continue;
        if (cfg.ablation.texture_from_scratch && s == "pretrain-base") continue;
        out.push_back(s);
    }
    return out;
}

std::vector<std::string> prerequisites(const std::string& stage, const PipelineConfig& cfg) {
    if (stage == "train-mask-ddpm" || stage == "pretrain-base") return {"prepare-crops"};
    if (stage == "gen-masks") return {"train-mask-ddpm"};
    if (stage == "train-multiview") return {"build-shape-corpus"};
    if (stage == "gen-views") return {"gen-masks", "train-multiview"};
    if (stage == "reconstruct") return {"gen-views"};
    if (stage == "slice") return {cfg.ablation.use_sh_volumes_directly ? "prepare-crops" : "reconstruct"};
    if (stage == "finetune-texture") return {cfg.ablation.texture_from_scratch ? "prepare-crops" : "pretrain-base"};
    if (stage == "gen-textures") return {"finetune-texture", cfg.volumetric() ? "slice" : "gen-masks"};
    if (stage == "compose") return {"gen-textures", "prepare-crops"};
    if (stage == "evaluate") return {"compose"};
    return {};
}

StageRecord run_stage(const std::string& stage, const PipelineConfig& cfg) {
    const auto& known = all_stages();
    if (std::find(known.begin(), known.end(), stage) == known.end())
        throw ConfigurationError("unknown stage '" + stage + "'");
    const auto active = stages_for(cfg);
    if (std::find(active.begin(), active.end(), stage) == active.end())
        throw ConfigurationError("stage '" + stage + "' is not part of this " + (cfg.volumetric() ? "3D" : "2D") +
                                 " pipeline configuration");
    const fs::path records = cfg.work_dir / "records";
    for (const auto& pre : prerequisites(stage, cfg))
        if (!fs::exists(records / (pre + ".json")))
            throw DependencyError("stage '" + stage + "' requires stage '" + pre + "' to have run first");

    spdlog::info("stage {}: start", stage);
    const auto t0 = std::chrono::steady_clock::now();
    auto [roots, summary] = dispatch(stage, cfg);
    StageRecord rec;
    rec.stage = stage;
    rec.seed = stage_seed(cfg, stage);
    rec.config_hash = config_hash(to_json(cfg));
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.artifacts = hash_tree(cfg, roots);
    rec.summary = summary;
    fs::create_directories(records);
    write_json(records / (stage + ".json"), {{"stage", rec.stage},
                                             {"seed", rec.seed},
                                             {"config_hash", rec.config_hash},
                                             {"wall_seconds", rec.wall_seconds},
                                             {"artifacts", rec.artifacts},
                                             {"summary", rec.summary}});
    spdlog::info("stage {}: done in {:.1f}s", stage, rec.wall_seconds);
    return rec;
}

std::vector<StageRecord> run_pipeline(const PipelineConfig& cfg, const std::function<void(const StageRecord&)>& on_stage) {
    std::vector<StageRecord> out;
    for (const auto& s : stages_for(cfg)) {
        out.push_back(run_stage(s, cfg));
        if (on_stage) on_stage(out.back());
    }
    return out;
}

std::vector<MetricRecord> evaluate(const PipelineConfig& cfg, const EvaluationRequest& req) {
    const auto extractor = downsample_extractor(cfg.evaluate.feature_side);
    const auto real = extract_features(crop_slices(req.real, cfg.data.crop_size), extractor);
    const auto synth = extract_features(crop_slices(req.synthetic, cfg.data.crop_size), extractor);
    const std::string dataset = req.real.filename().string();
    std::vector<MetricRecord> out{{"FID_r2s", dataset, frechet_distance(real, synth)}};
    if (!req.real_reference.empty()) {
        const auto ref = extract_features(crop_slices(req.real_reference, cfg.data.crop_size), extractor);
        out.push_back({"FID_r2r", dataset, frechet_distance(real, ref)});
    }
    out.push_back({"n_real", dataset, double(real.n)});
    out.push_back({"n_synthetic", dataset, double(synth.n)});
    out.push_back({"feature_dim", dataset, double(real.d)});
    if (!req.predicted_labels.empty() && !req.ground_truth_labels.empty())
        out.push_back({"SEG", dataset, seg_score(read_labels_any(req.predicted_labels), read_labels_any(req.ground_truth_labels))});
    return out;
}

}  // namespace cellsynth::pipeline
