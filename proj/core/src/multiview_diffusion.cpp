#include "cellsynth/multiview_diffusion.hpp"

#include <cmath>
#include <optional>

#include "cellsynth/checkpoint.hpp"

namespace cellsynth {

namespace {

void pose_features(const CameraPose& p, float* out) {
    out[0] = float(std::cos(p.azimuth));
    out[1] = float(std::sin(p.azimuth));
    out[2] = float(std::cos(p.elevation));
    out[3] = float(std::sin(p.elevation));
}

}  // namespace

nn::UNetConfig default_multiview_unet() {
    nn::UNetConfig c;
    c.in_channels = 2;
    c.out_channels = 1;
    c.base_channels = 16;
    c.channel_mults = {1, 2, 2, 2};
    c.attention_levels = {2, 3};
    c.extra_embedding_features = kMultiviewPoseFeatures;
    return c;
}

MultiviewModel::MultiviewModel(const MultiviewModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed)
    : cfg_(cfg), sched_(std::move(sched)), ps_(std::make_shared<nn::ParameterStore>()) {
    if (cfg.views < 1) throw RangeError("multiview model needs at least one view");
    cfg_.unet.in_channels = 2;
    cfg_.unet.out_channels = 1;
    cfg_.unet.extra_embedding_features = kMultiviewPoseFeatures;
    ring_ = sample_pose_ring(cfg_.views, cfg_.ring_elevation);
    Rng rng(init_seed);
    net_ = nn::UNet(*ps_, "multiview", cfg_.unet, rng);
}

nn::Var MultiviewModel::forward(const nn::Var& x_t, const std::vector<int>& timesteps, const Array& condition,
                                const std::vector<CameraPose>& condition_poses,
                                const std::vector<std::uint8_t>& present,
                                const std::vector<CameraPose>& view_poses) const {
    const int b = int(timesteps.size());
    const int n = cfg_.views;
    const int hw = cfg_.image_size * cfg_.image_size;
    if (x_t.shape() != std::vector<int>{b * n, 1, cfg_.image_size, cfg_.image_size})
        throw ContractViolation("multiview forward: expected [" + std::to_string(b * n) + ",1," +
                                std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "], got " +
                                shape_string(x_t.shape()));
    if (condition.shape != std::vector<int>{b, 1, cfg_.image_size, cfg_.image_size} ||
        int(condition_poses.size()) != b || int(present.size()) != b || int(view_poses.size()) != n)
        throw ContractViolation("multiview forward: condition or pose inputs do not match the batch");

    Array cond({b * n, 1, cfg_.image_size, cfg_.image_size});
    Array extra({b * n, kMultiviewPoseFeatures});
    std::vector<int> ts;
    ts.reserve(std::size_t(b * n));
    for (int o = 0; o < b; ++o)
        for (int v = 0; v < n; ++v) {
            const std::size_t row = std::size_t(o * n + v);
            if (present[std::size_t(o)])
                std::copy_n(condition.data.begin() + std::ptrdiff_t(o) * hw, hw,
                            cond.data.begin() + std::ptrdiff_t(row) * hw);
            float* f = extra.data.data() + row * kMultiviewPoseFeatures;
            pose_features(view_poses[std::size_t(v)], f);
            if (present[std::size_t(o)]) pose_features(condition_poses[std::size_t(o)], f + 4);
            ts.push_back(timesteps[std::size_t(o)]);
        }
    nn::Var input = nn::concat_channels(x_t, nn::Var::constant(cond));
    return net_.forward({.x = input, .timesteps = ts, .extra = std::move(extra), .views = n});
}

nn::Var MultiviewModel::forward(const MultiviewBatch& batch) const {
    if (batch.views != cfg_.views)
        throw ContractViolation("batch has " + std::to_string(batch.views) + " views, model expects " +
                                std::to_string(cfg_.views));
    return forward(nn::Var::constant(batch.x_t), batch.timesteps, batch.condition, batch.condition_poses,
                   batch.condition_present, ring_);
}

Array MultiviewModel::predict_noise(const Array& x_t, int t, const Array* condition,
                                    const CameraPose& condition_pose) const {
    nn::NoGradGuard ng;
    const Array empty({1, 1, cfg_.image_size, cfg_.image_size});
    return forward(nn::Var::constant(x_t), {t}, condition ? *condition : empty, {condition_pose},
                   {std::uint8_t(condition != nullptr)}, ring_)
        .to_array();
}

void MultiviewModel::save(const std::filesystem::path& path) const {
    Json ring = Json::array();
    for (const auto& p : ring_) ring.push_back({p.azimuth, p.elevation});
    Json header = {{"kind", "multiview"},
                   {"views", cfg_.views},
                   {"image_size", cfg_.image_size},
                   {"ring_elevation", cfg_.ring_elevation},
                   {"pose_ring", ring},
                   {"unet", cfg_.unet},
                   {"schedule", schedule_to_json(sched_)}};
    save_checkpoint(path, header, *ps_);
}

MultiviewModel MultiviewModel::load(const std::filesystem::path& path, int expected_views) {
    const Json h = read_checkpoint_header(path);
    if (h.value("kind", "") != "multiview") throw InputError("not a multiview checkpoint: " + path.string());
    const int views = h.at("views").get<int>();
    if (views != expected_views)
        throw ConfigurationError("checkpoint " + path.string() + " was trained for " + std::to_string(views) +
                                 " views, requested " + std::to_string(expected_views));
    MultiviewModelConfig cfg;
    cfg.views = views;
    cfg.image_size = h.at("image_size").get<int>();
    cfg.ring_elevation = h.at("ring_elevation").get<double>();
    cfg.unet = h.at("unet").get<nn::UNetConfig>();
    MultiviewModel m(cfg, schedule_from_json(h.at("schedule")), 0);
    load_checkpoint(path, *m.ps_);
    return m;
}

MultiviewBatch make_multiview_batch(const std::vector<const ShapeRecord*>& objects, const DiffusionSchedule& sched,
                                    Rng& rng, double condition_dropout) {
    if (objects.empty()) throw ContractViolation("multiview batch needs at least one object");
    const int n = int(objects[0]->ring.views.size());
    const int size = n > 0 ? objects[0]->ring.views[0].width : 0;
    if (n < 1) throw ContractViolation("multiview batch: record without views");
    const int b = int(objects.size());
    const std::size_t hw = std::size_t(size) * size;
    Array x0({b, n, size, size});
    MultiviewBatch out;
    out.views = n;
    out.condition = Array({b, 1, size, size});
    for (int o = 0; o < b; ++o) {
        const ShapeRecord& r = *objects[std::size_t(o)];
        if (int(r.ring.views.size()) != n) throw ContractViolation("multiview batch: records differ in view count");
        for (int v = 0; v < n; ++v) {
            const auto& m = r.ring.views[std::size_t(v)];
            if (m.width != size || m.height != size) throw ContractViolation("multiview batch: view size mismatch");
            for (std::size_t p = 0; p < hw; ++p)
                x0.data[(std::size_t(o) * n + v) * hw + p] = m.pixels[p] ? 1.0f : -1.0f;
        }
        if (r.condition.width != size || r.condition.height != size)
            throw ContractViolation("multiview batch: condition size mismatch");
        const bool keep = rng.uniform() >= condition_dropout;
        out.condition_present.push_back(keep ? 1 : 0);
        out.condition_poses.push_back(r.condition_pose);
        if (keep)
            for (std::size_t p = 0; p < hw; ++p)
                out.condition.data[std::size_t(o) * hw + p] = r.condition.pixels[p] ? 1.0f : -1.0f;
    }
    // Views ride in the channel axis here so each object draws a single timestep.
    NoisyBatch nb = make_noisy_batch(x0, sched, rng);
    out.timesteps = std::move(nb.timesteps);
    out.x_t = Array({b * n, 1, size, size}, std::move(nb.x_t.data));
    out.eps = Array({b * n, 1, size, size}, std::move(nb.eps.data));
    return out;
}

double multiview_loss(const Array& predicted, const Array& target) {
    if (!predicted.same_shape(target)) throw ContractViolation("multiview_loss: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double d = double(predicted.data[i]) - target.data[i];
        acc += d * d;
    }
    return predicted.size() ? acc / double(predicted.size()) : 0.0;
}

nn::Var joint_loss(const MultiviewModel& model, const MultiviewBatch& batch) {
    return nn::mse(model.forward(batch), batch.eps.data);
}

double joint_train_step(MultiviewModel& model, const MultiviewBatch& batch, nn::Adam& optimizer) {
    nn::Var loss = joint_loss(model, batch);
    const double value = loss.item();
    if (!std::isfinite(value)) throw OptimizationFailure("multiview loss is not finite");
    loss.backward();
    optimizer.step();
    return value;
}

TrainingLog train_multiview_model(MultiviewModel& model, const std::vector<ShapeRecord>& corpus,
                                  const TrainOptions& opts) {
    if (corpus.empty()) throw InputError("shape corpus is empty");
    const auto& cfg = model.config();
    for (const auto& r : corpus) {
        if (int(r.ring.views.size()) != cfg.views)
            throw ContractViolation("corpus record has " + std::to_string(r.ring.views.size()) +
                                    " views, model expects " + std::to_string(cfg.views));
        if (r.condition.width != cfg.image_size)
            throw InputError("corpus view size " + std::to_string(r.condition.width) + " does not match model size " +
                             std::to_string(cfg.image_size));
    }
    Rng rng(opts.seed);
    nn::Adam adam(model.parameters().params(), {.lr = float(opts.learning_rate)});
    std::optional<nn::Ema> ema;
    if (opts.ema_decay > 0.0) ema.emplace(model.parameters().params(), float(opts.ema_decay));
    TrainingLog log;
    for (int step = 0; step < opts.steps; ++step) {
        std::vector<const ShapeRecord*> objs;
        for (int b = 0; b < opts.batch_size; ++b)
            objs.push_back(&corpus[std::size_t(rng.uniform_int(0, int(corpus.size()) - 1))]);
        const MultiviewBatch batch = make_multiview_batch(objs, model.schedule(), rng, opts.condition_dropout);
        double value;
        try {
            value = joint_train_step(model, batch, adam);
        } catch (const OptimizationFailure&) {
            throw OptimizationFailure("multiview loss diverged at step " + std::to_string(step));
        }
        if (ema) ema->update();
        log.losses.push_back(value);
        if (opts.on_step) opts.on_step(step, value);
    }
    if (ema) ema->copy_to_params();
    return log;
}

MultiviewSample sample_views(const MultiviewModel& model, const MaskImage& condition, int views,
                             const SamplerConfig& cfg, const CameraPose& condition_pose) {
    const auto& mc = model.config();
    if (views != mc.views)
        throw ContractViolation("model was trained for " + std::to_string(mc.views) + " views, requested " +
                                std::to_string(views));
    if (condition.width != mc.image_size || condition.height != mc.image_size)
        throw ContractViolation("condition must be " + std::to_string(mc.image_size) + "x" +
                                std::to_string(mc.image_size));
    if (foreground_area(condition) == 0) throw InputError("condition mask is empty");

    const Array cond = stack_images({to_signed(condition)});
    const Denoiser den = [&](const Array& x, int t, const Array* c) {
        return model.predict_noise(x, t, c, condition_pose);
    };
    Rng latent_rng(derive_seed(cfg.seed, "multiview-latent"));
    Array latent({views, 1, mc.image_size, mc.image_size}, latent_rng.normal_vector(
                                                                 std::size_t(views) * mc.image_size * mc.image_size));
    const Array x = sample(den, &cond, std::move(latent), cfg, model.schedule());
    MultiviewSample out;
    out.views.poses = model.pose_ring();
    for (int v = 0; v < views; ++v) {
        out.raw.push_back(image_from_array(x, v));
        out.views.views.push_back(binarize(out.raw.back()));
    }
    return out;
}

}  // namespace cellsynth
