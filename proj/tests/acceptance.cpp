// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Usage: cellsynth_acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>
#include <unistd.h>

#include "cellsynth/dataset_io.hpp"
#include "cellsynth/metrics.hpp"
#include "cellsynth/multiview_diffusion.hpp"
#include "cellsynth/population.hpp"
#include "cellsynth/surface_recon.hpp"
#include "cellsynth/texture_diffusion.hpp"
#include "cellsynth/toy.hpp"
#include "pipeline.hpp"

using namespace cellsynth;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double max_abs_diff(const Array& a, const Array& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a.data[i] - b.data[i])));
    return m;
}

double pearson(const std::vector<float>& a, const std::vector<float>& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

// ---- 1: correlated latent statistics ----

Outcome latent_statistics() {
    const auto t0 = std::chrono::steady_clock::now();
    const double rho = 0.7;
    const int slices = 5;
    const auto set = make_correlated_latents(slices, rho, {10000}, 11);
    double vmin = 1e9, vmax = -1e9, corr = 0.0;
    int pairs = 0;
    for (const auto& c : set.combined) {
        double m = 0, v = 0;
        for (float x : c.data) m += x;
        m /= double(c.size());
        for (float x : c.data) v += (x - m) * (x - m);
        v /= double(c.size() - 1);
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
    }
    for (int a = 0; a < slices; ++a)
        for (int b = a + 1; b < slices; ++b, ++pairs)
            corr += pearson(set.combined[std::size_t(a)].data, set.combined[std::size_t(b)].data);
    corr /= pairs;
    const double expected = rho * rho / (1 + rho * rho), secs = seconds_since(t0);
    return {vmin >= 0.95 && vmax <= 1.05 && std::abs(corr - expected) <= 0.02 && secs < 5.0,
            fmt("variance [%.4f, %.4f], correlation %.4f (expected %.4f), %.2fs", vmin, vmax, corr, expected, secs)};
}

// ---- 2: DDIM determinism ----

Outcome ddim_determinism() {
    TextureModelConfig cfg;
    cfg.image_size = 32;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_mults = {1, 2};
    cfg.unet.emb_dim = 16;
    ConditionalTextureModel model(cfg, DiffusionSchedule::linear(), 1);
    // Random weights everywhere, so the network is far from the zero-initialised identity paths.
    Rng rng(2);
    for (auto& p : model.parameters().params())
        for (auto& v : p.mutable_value()) v += float(0.05 * rng.normal());
    Array mask({1, 1, 32, 32});
    const auto disc = toy::disc_mask(32, 9);
    for (std::size_t i = 0; i < mask.size(); ++i) mask.data[i] = disc.pixels[i] ? 1.0f : -1.0f;
    SamplerConfig sc;
    sc.num_inference_steps = 10;
    sc.eta = 0.0;
    sc.guidance_scale = 3.0;
    sc.seed = 5;
    const Array latent = make_correlated_latents(1, 0.0, {1, 1, 32, 32}, 9).combined[0];
    const Array a = sample(model.denoiser(), &mask, latent, sc, model.schedule());
    // Shift the heap between the two runs; results must not depend on buffer placement.
    std::vector<std::vector<float>> ballast;
    for (int i = 1; i < 40; ++i) ballast.emplace_back(std::size_t(i * 7), 1.0f);
    const Array b = sample(model.denoiser(), &mask, latent, sc, model.schedule());
    const double diff = max_abs_diff(a, b);
    return {diff < 1e-6, fmt("max abs difference %.3g over 32x32, 10 steps", diff)};
}

// ---- 3: forward/backward round trip with an oracle denoiser ----

Outcome oracle_round_trip() {
    const auto s = DiffusionSchedule::linear();
    Rng rng(6);
    Array x0({1, 1, 32, 32}), eps({1, 1, 32, 32}, rng.normal_vector(1024));
    for (auto& v : x0.data) v = float(rng.uniform() * 2 - 1);
    // Returns exactly the noise that produced x_t from x0.
    Denoiser oracle = [&](const Array& xt, int t, const Array*) {
        const double ab = s.alpha_bar[std::size_t(t)];
        Array out(xt.shape);
        for (std::size_t i = 0; i < xt.size(); ++i)
            out.data[i] = float((xt.data[i] - std::sqrt(ab) * x0.data[i]) / std::sqrt(1 - ab));
        return out;
    };
    double worst = 0.0;
    for (int steps : {10, 50}) {
        SamplerConfig cfg;
        cfg.num_inference_steps = steps;
        const Array latent = forward_diffuse(x0, s.num_timesteps - 1, eps, s);
        worst = std::max(worst, max_abs_diff(sample(oracle, nullptr, latent, cfg, s), x0));
    }
    return {worst <= 1e-4, fmt("max x0 error %.3g", worst)};
}

// ---- 4: joint multiview training signal ----

Outcome multiview_training_signal() {
    ShapeCorpusOptions opts;
    opts.views = 4;
    opts.view_size = 16;
    opts.voxel_resolution = 32;
    std::vector<ShapeRecord> corpus;
    for (int i = 0; i < 10; ++i) corpus.push_back(make_shape_record(100 + std::uint64_t(i), opts));
    MultiviewModelConfig cfg;
    cfg.views = 4;
    cfg.image_size = 16;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_mults = {1, 2, 2};
    cfg.unet.attention_levels = {1, 2};
    cfg.unet.emb_dim = 32;
    MultiviewModel model(cfg, DiffusionSchedule::linear(), 5);
    TrainOptions to;
    to.steps = 500;
    to.batch_size = 4;
    to.seed = 8;
    const auto log = train_multiview_model(model, corpus, to);
    const double head = log.head_mean(10), tail = log.tail_mean(50);

    Rng rng(3);
    std::vector<const ShapeRecord*> objs{&corpus[0], &corpus[1]};
    const auto batch = make_multiview_batch(objs, model.schedule(), rng, 0.0);
    const double oracle = multiview_loss(batch.eps, batch.eps);
    return {tail < 0.5 * head && oracle == 0.0,
            fmt("loss %.4f -> %.4f (ratio %.3f) in 500 steps, oracle loss %.1f", head, tail, tail / head, oracle)};
}

// ---- 5: surface reconstruction fidelity ----

Outcome surface_reconstruction() {
    const auto t0 = std::chrono::steady_clock::now();
    const int d = 64;
    const auto shape = generate_sh_shape(1, 5, 3);
    const auto volume = voxelize(shape, d);
    const auto poses = sample_pose_ring(16, std::numbers::pi / 6);
    const auto views = render_silhouettes(volume, poses, d);
    SdfFitOptions opts;
    opts.iterations = 5000;
    opts.seed = 3;
    const auto field = fit_sdf(views, opts);
    const double view_iou = mean_view_iou(render_field(field, poses, d), views);
    const double vol_iou = volume_iou(extract_volume(field, d), volume);
    const double secs = seconds_since(t0);
    return {view_iou >= 0.85 && vol_iou >= 0.7 && secs < 3600,
            fmt("silhouette IoU %.3f, volume IoU %.3f, D=%d, 16 views, %.0fs", view_iou, vol_iou, d, secs)};
}

// ---- 6: SEG against a brute-force implementation ----

double brute_force_seg(const LabelMap& pred, const LabelMap& gt) {
    std::set<int> gt_ids, pred_ids;
    for (auto v : gt.voxels)
        if (v) gt_ids.insert(v);
    for (auto v : pred.voxels)
        if (v) pred_ids.insert(v);
    double total = 0.0;
    for (int g : gt_ids) {
        double score = 0.0;
        for (int p : pred_ids) {
            int inter = 0, uni = 0, r = 0;
            for (std::size_t i = 0; i < gt.voxels.size(); ++i) {
                const bool in_g = gt.voxels[i] == g, in_p = pred.voxels[i] == p;
                inter += in_g && in_p;
                uni += in_g || in_p;
                r += in_g;
            }
            if (inter * 2 > r) score = double(inter) / uni;
        }
        total += score;
    }
    return total / double(gt_ids.size());
}

LabelMap random_labels(Rng& rng, int size, int max_id) {
    LabelMap m(size, size, 1);
    const int rects = rng.uniform_int(1, 12);
    for (int k = 0; k < rects; ++k) {
        const int id = rng.uniform_int(0, max_id);
        const int x0 = rng.uniform_int(0, size - 1), y0 = rng.uniform_int(0, size - 1);
        const int w = rng.uniform_int(1, 14), h = rng.uniform_int(1, 14);
        for (int y = y0; y < std::min(size, y0 + h); ++y)
            for (int x = x0; x < std::min(size, x0 + w); ++x) m.at(x, y, 0) = std::uint16_t(id);
    }
    return m;
}

Outcome seg_oracle() {
    Rng rng(21);
    int mismatches = 0, matched = 0;
    for (int c = 0; c < 100; ++c) {
        LabelMap gt = random_labels(rng, 32, 6), pred = random_labels(rng, 32, 6);
        if (std::all_of(gt.voxels.begin(), gt.voxels.end(), [](auto v) { return v == 0; })) gt.at(3, 3, 0) = 1;
        if (c % 2 == 0)
            for (std::size_t i = 0; i < pred.voxels.size(); ++i)
                if (rng.uniform() < 0.8) pred.voxels[i] = gt.voxels[i];
        const double fast = seg_score(pred, gt);
        mismatches += fast != brute_force_seg(pred, gt);
        matched += fast > 0.0;
    }
    return {mismatches == 0, fmt("%d/100 exact matches (%d pairs with nonzero score)", 100 - mismatches, matched)};
}

// ---- 7: Fréchet distance ----

FeatureSet gaussian_set(Rng& rng, int n, int d, double shift) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
    for (auto& r : rows)
        for (auto& v : r) v = rng.normal() + shift;
    return make_feature_set(rows);
}

Outcome frechet_correctness() {
    Rng rng(31);
    const auto a = gaussian_set(rng, 500, 8, 0.3);
    const double same = frechet_distance(a, a);

    const int d = 8;
    const double m = 1.0;
    const double iso = frechet_distance(gaussian_set(rng, 10000, d, 0.0), gaussian_set(rng, 10000, d, m));
    const double iso_expected = d * m * m;

    FeatureSet p, q;
    p.d = q.d = 5;
    p.n = q.n = 2;
    p.mean.assign(5, 0.5);
    q.mean.assign(5, -0.5);
    p.covariance.assign(25, 0.0);
    q.covariance.assign(25, 0.0);
    double closed = 5.0;
    for (int i = 0; i < 5; ++i) {
        p.covariance[std::size_t(i * 6)] = i + 1;
        q.covariance[std::size_t(i * 6)] = 0.5 * i + 2;
        closed += std::pow(std::sqrt(i + 1.0) - std::sqrt(0.5 * i + 2.0), 2);
    }
    const double diag = frechet_distance(p, q);
    const bool ok = std::abs(same) <= 1e-8 && std::abs(iso - iso_expected) <= 0.02 * iso_expected &&
                    std::abs(diag - closed) <= 1e-6;
    return {ok, fmt("identical %.2g; isotropic %.4f vs %.1f; diagonal %.9f vs %.9f", same, iso, iso_expected, diag,
                    closed)};
}

// ---- 8: population invariants ----

std::vector<CellSample> planar_cells(int count, std::uint64_t seed) {
    std::vector<CellSample> out;
    for (auto& p : toy::cell_pairs(count, 32, seed)) {
        CellSample c;
        c.texture.slices.push_back(p.image);
        c.mask.slices.push_back(p.mask);
        c.mask.z.push_back(0.5);
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<std::pair<int, int>> pixels_of(const LabelMap& m, int id) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y, 0) == id) out.emplace_back(x, y);
    return out;
}

double mean_nn_centroid_distance(const LabelMap& m, int count) {
    std::vector<std::array<double, 2>> c;
    for (int id = 1; id <= count; ++id) {
        double cx = 0, cy = 0;
        const auto px = pixels_of(m, id);
        for (auto [x, y] : px) {
            cx += x;
            cy += y;
        }
        c.push_back({cx / double(px.size()), cy / double(px.size())});
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        double best = 1e30;
        for (std::size_t j = 0; j < c.size(); ++j)
            if (i != j) best = std::min(best, std::hypot(c[i][0] - c[j][0], c[i][1] - c[j][1]));
        acc += best;
    }
    return acc / double(c.size());
}

Outcome population_invariants() {
    PlacementPolicy policy;
    policy.clustering_probability = 1.0;
    policy.target_count = 10;
    const auto cells = planar_cells(10, 5);
    int overlaps = 0, far = 0, short_frames = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto f = synthesize_population(cells, {512, 512, 1, 0.0f, 0.0}, policy, std::uint64_t(1000 + trial));
        short_frames += f.placed != 10;
        // Each mask must survive intact; any claimed pixel would shrink some instance.
        for (int id = 1; id <= f.placed; ++id)
            overlaps += pixels_of(f.labels, id).size() != foreground_area(cells[std::size_t(id - 1)].mask.slices[0]);
        auto prior = pixels_of(f.labels, 1);
        for (int id = 2; id <= f.placed; ++id) {
            const auto cur = pixels_of(f.labels, id);
            double best = 1e30;
            for (auto [x, y] : cur)
                for (auto [u, v] : prior) best = std::min(best, std::hypot(double(x - u), double(y - v)));
            far += best > double(policy.neighborhood_radius);
            prior.insert(prior.end(), cur.begin(), cur.end());
        }
    }
    std::vector<double> means;
    const auto spread = planar_cells(10, 6);
    for (double p : {0.0, 0.5, 1.0}) {
        PlacementPolicy pp;
        pp.clustering_probability = p;
        pp.target_count = 10;
        double acc = 0.0;
        for (int t = 0; t < 100; ++t)
            acc += mean_nn_centroid_distance(
                synthesize_population(spread, {512, 512, 1, 0.0f, 0.0}, pp, std::uint64_t(t)).labels, 10);
        means.push_back(acc / 100);
    }
    const bool ok = overlaps == 0 && far == 0 && short_frames == 0 && means[0] >= means[1] && means[1] >= means[2];
    return {ok, fmt("overlaps %d, out-of-radius cells %d, incomplete frames %d; NN distance %.1f / %.1f / %.1f",
                    overlaps, far, short_frames, means[0], means[1], means[2])};
}

// ---- 9 and 10: texture conditioning and cross-slice correlation ----

struct TextureModels {
    std::unique_ptr<ConditionalTextureModel> pretrained, scratch;
    double pretrain_seconds = 0, finetune_seconds = 0;
};

const TextureModels& texture_models() {
    static const TextureModels models = [] {
        const auto raw = toy::cell_pairs(200, 32, 1);
        std::vector<GrayImage> images;
        std::vector<TexturePair> pairs;
        for (const auto& p : raw) {
            images.push_back(p.image);
            pairs.push_back({p.image, p.mask});
        }
        TextureModelConfig cfg;
        cfg.image_size = 32;
        cfg.unet.base_channels = 16;
        TextureBase base(cfg, DiffusionSchedule::linear(), 1);
        TrainOptions o;
        o.batch_size = 16;
        o.ema_decay = 0.999;
        o.steps = 1000;
        o.seed = 2;
        TextureModels m;
        auto t0 = std::chrono::steady_clock::now();
        pretrain_base(base, images, o);
        m.pretrain_seconds = seconds_since(t0);
        o.steps = 500;
        o.seed = 3;
        t0 = std::chrono::steady_clock::now();
        m.pretrained = std::make_unique<ConditionalTextureModel>(finetune_conditional(base, pairs, o, false).model);
        m.finetune_seconds = seconds_since(t0);
        m.scratch = std::make_unique<ConditionalTextureModel>(finetune_conditional(base, pairs, o, true).model);
        return m;
    }();
    return models;
}

SamplerConfig texture_sampler() {
    SamplerConfig sc;
    sc.num_inference_steps = 50;
    sc.guidance_scale = 5.0;
    return sc;
}

double mean_alignment(const ConditionalTextureModel& model, const std::vector<MaskImage>& masks) {
    MaskStack ms;
    ms.slices = masks;
    for (std::size_t i = 0; i < masks.size(); ++i) ms.z.push_back(double(i));
    // rho = 0 makes every sample an independent draw.
    const auto latents = make_correlated_latents(int(masks.size()), 0.0, {1, 1, 32, 32}, 5);
    const auto tex = generate_texture(model, ms, latents, texture_sampler());
    double acc = 0.0;
    for (std::size_t i = 0; i < masks.size(); ++i) acc += texture_mask_iou(tex.slices[i], masks[i]);
    return acc / double(masks.size());
}

Outcome conditioning_alignment() {
    const auto& m = texture_models();
    const auto masks = toy::ellipse_masks(32, 32, 77);
    const double pre = mean_alignment(*m.pretrained, masks), scratch = mean_alignment(*m.scratch, masks);
    return {pre >= 0.6 && scratch < pre,
            fmt("foreground IoU %.3f with pretraining, %.3f from scratch (32 samples; pretrain %.0fs, finetune %.0fs)",
                pre, scratch, m.pretrain_seconds, m.finetune_seconds)};
}

Outcome correlation_monotonicity() {
    const auto& m = texture_models();
    const auto masks = toy::ellipse_masks(5, 32, 91);
    MaskStack ms;
    ms.slices = masks;
    for (int i = 0; i < 5; ++i) ms.z.push_back(i);
    std::vector<double> corr;
    for (double rho : {0.0, 0.7, 4.0}) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k)
            acc += mean_interslice_correlation(generate_texture(
                *m.pretrained, ms, make_correlated_latents(5, rho, {1, 1, 32, 32}, 100 + std::uint64_t(k)),
                texture_sampler()));
        corr.push_back(acc / 4);
    }
    return {corr[0] <= corr[1] && corr[1] <= corr[2],
            fmt("inter-slice correlation %.4f / %.4f / %.4f at rho 0 / 0.7 / 4", corr[0], corr[1], corr[2])};
}

// ---- 11: end-to-end toy pipelines ----

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string label_bytes(const fs::path& out, const std::string& seq) {
    std::string all;
    for (const auto& e : fs::directory_iterator(out / (seq + "_ST") / "SEG")) all += slurp(e.path());
    return all;
}

Outcome end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path root = fs::temp_directory_path() / ("cellsynth_acceptance_" + std::to_string(::getpid()));
    std::vector<std::string> notes;
    bool ok = true;
    for (auto mode : {pipeline::Mode::Planar, pipeline::Mode::Volumetric}) {
        const std::string tag = mode == pipeline::Mode::Planar ? "2D" : "3D";
        std::string text = pipeline::toy_config_text(mode);
        const auto set = [&](const std::string& from, const std::string& to) { text.replace(text.find(from), from.size(), to); };
        set("work_dir = \"work\"", "work_dir = \"" + (root / tag / "work").string() + "\"");
        set("output_dir = \"synthetic\"", "output_dir = \"" + (root / tag / "out").string() + "\"");
        const fs::path config = root / (tag + ".toml");
        fs::create_directories(root / tag);
        std::ofstream(config) << text;
        try {
            const auto cfg = pipeline::load_config(config);
            pipeline::run_pipeline(cfg);
            const fs::path out = cfg.output_dir;
            read_manifest(out);
            const auto seq = load_sequence(out / "01");
            const std::string first = label_bytes(out, "01");
            pipeline::run_pipeline(cfg);
            read_manifest(out);
            const bool same = label_bytes(out, "01") == first;
            const auto depth = read_label_map(*seq.frames.at(0).silver).depth;
            ok = ok && same && !seq.frames.empty() && depth == (cfg.volumetric() ? cfg.population.depth : 1);
            notes.push_back(fmt("%s: %zu frames, depth %d, rerun %s", tag.c_str(), seq.frames.size(), depth,
                                same ? "identical" : "DIFFERS"));
        } catch (const std::exception& e) {
            ok = false;
            notes.push_back(tag + ": " + e.what());
        }
    }
    fs::remove_all(root);
    const double secs = seconds_since(t0);
    return {ok && secs < 1800, fmt("%s; %s; %.0fs for both modes run twice", notes[0].c_str(), notes[1].c_str(), secs)};
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_level(spdlog::level::warn);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"correlated latent statistics", latent_statistics},
        {"DDIM determinism", ddim_determinism},
        {"oracle round trip", oracle_round_trip},
        {"multiview joint training signal", multiview_training_signal},
        {"surface reconstruction fidelity", surface_reconstruction},
        {"SEG oracle equivalence", seg_oracle},
        {"Frechet distance correctness", frechet_correctness},
        {"population invariants", population_invariants},
        {"conditioning alignment", conditioning_alignment},
        {"correlation monotonicity", correlation_monotonicity},
        {"end-to-end toy pipelines", end_to_end},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = int(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
