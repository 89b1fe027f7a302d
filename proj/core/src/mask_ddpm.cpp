#include "cellsynth/mask_ddpm.hpp"

#include <cmath>
#include <optional>

#include "cellsynth/checkpoint.hpp"

namespace cellsynth {

MaskModel::MaskModel(const MaskModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed)
    : cfg_(cfg), sched_(std::move(sched)), ps_(std::make_shared<nn::ParameterStore>()) {
    cfg_.unet.in_channels = 1;
    cfg_.unet.out_channels = 1;
    Rng rng(init_seed);
    net_ = nn::UNet(*ps_, "mask", cfg_.unet, rng);
}

nn::Var MaskModel::forward(const nn::Var& x_t, const std::vector<int>& timesteps) const {
    return net_.forward({.x = x_t, .timesteps = timesteps});
}

Array MaskModel::predict_noise(const Array& x_t, int t) const {
    nn::NoGradGuard ng;
    return forward(nn::Var::constant(x_t), std::vector<int>(std::size_t(x_t.dim(0)), t)).to_array();
}

Denoiser MaskModel::denoiser() const {
    return [this](const Array& x, int t, const Array*) { return predict_noise(x, t); };
}

void MaskModel::save(const std::filesystem::path& path) const {
    Json header = {{"kind", "mask"},
                   {"image_size", cfg_.image_size},
                   {"unet", cfg_.unet},
                   {"schedule", schedule_to_json(sched_)}};
    save_checkpoint(path, header, *ps_);
}

MaskModel MaskModel::load(const std::filesystem::path& path) {
    const Json h = read_checkpoint_header(path);
    if (h.value("kind", "") != "mask") throw InputError("not a mask model checkpoint: " + path.string());
    MaskModelConfig cfg;
    cfg.image_size = h.at("image_size").get<int>();
    cfg.unet = h.at("unet").get<nn::UNetConfig>();
    MaskModel m(cfg, schedule_from_json(h.at("schedule")), 0);
    load_checkpoint(path, *m.ps_);
    return m;
}

TrainingLog train_mask_model(MaskModel& model, const std::vector<MaskImage>& corpus, const TrainOptions& opts) {
    if (corpus.empty()) throw InputError("mask corpus is empty");
    const int size = model.config().image_size;
    for (const auto& m : corpus)
        if (m.width != size || m.height != size)
            throw InputError("mask crop " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                             " does not match model size " + std::to_string(size));
    std::vector<GrayImage> signed_corpus;
    signed_corpus.reserve(corpus.size());
    for (const auto& m : corpus) signed_corpus.push_back(to_signed(m));

    Rng rng(opts.seed);
    nn::Adam adam(model.parameters().params(), {.lr = float(opts.learning_rate)});
    std::optional<nn::Ema> ema;
    if (opts.ema_decay > 0.0) ema.emplace(model.parameters().params(), float(opts.ema_decay));
    TrainingLog log;
    for (int step = 0; step < opts.steps; ++step) {
        std::vector<GrayImage> batch;
        for (int b = 0; b < opts.batch_size; ++b)
            batch.push_back(signed_corpus[std::size_t(rng.uniform_int(0, int(corpus.size()) - 1))]);
        NoisyBatch nb = make_noisy_batch(stack_images(batch), model.schedule(), rng);
        nn::Var loss = nn::mse(model.forward(nn::Var::constant(nb.x_t), nb.timesteps), nb.eps.data);
        const double value = loss.item();
        if (!std::isfinite(value)) throw OptimizationFailure("mask model loss diverged at step " + std::to_string(step));
        loss.backward();
        adam.step();
        if (ema) ema->update();
        log.losses.push_back(value);
        if (opts.on_step) opts.on_step(step, value);
    }
    if (ema) ema->copy_to_params();
    return log;
}

std::vector<MaskImage> generate_masks(const MaskModel& model, int count, const SamplerConfig& cfg,
                                      const MaskGenerationOptions& opts, MaskGenerationStats* stats) {
    if (count < 0) throw RangeError("mask count must be non-negative");
    const int size = model.config().image_size;
    std::vector<MaskImage> out(static_cast<std::size_t>(count));
    std::vector<int> attempts(std::size_t(count), 0);
    std::vector<int> pending(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) pending[std::size_t(i)] = i;
    MaskGenerationStats local;
    const Denoiser den = model.denoiser();

    while (!pending.empty()) {
        std::vector<int> next;
        for (std::size_t start = 0; start < pending.size(); start += std::size_t(opts.batch_size)) {
            const std::size_t end = std::min(pending.size(), start + std::size_t(opts.batch_size));
            const int n = int(end - start);
            Array latent({n, 1, size, size});
            for (int k = 0; k < n; ++k) {
                const int idx = pending[start + std::size_t(k)];
                Rng r(derive_seed(cfg.seed, "mask-sample", (std::uint64_t(idx) << 16) | std::uint64_t(attempts[idx])));
                for (std::size_t p = 0; p < std::size_t(size * size); ++p)
                    latent.data[std::size_t(k) * size * size + p] = float(r.normal());
            }
            SamplerConfig sc = cfg;
            sc.seed = derive_seed(cfg.seed, "mask-eta", pending[start] + (std::uint64_t(attempts[pending[start]]) << 32));
            Array x = sample(den, nullptr, std::move(latent), sc, model.schedule());
            for (int k = 0; k < n; ++k) {
                const int idx = pending[start + std::size_t(k)];
                MaskImage m = binarize(image_from_array(x, k));
                ++local.samples_drawn;
                if (count_components(m) == 1) ++local.single_component;
                if (keep_largest_component(m) == 0) {
                    ++local.rejected_empty;
                    if (++attempts[idx] > opts.max_retries)
                        throw GenerationFailure("mask " + std::to_string(idx) + " still empty after " +
                                                std::to_string(opts.max_retries) + " retries");
                    next.push_back(idx);
                } else {
                    out[std::size_t(idx)] = std::move(m);
                }
            }
        }
        pending = std::move(next);
    }
    if (stats) *stats = local;
    return out;
}

}  // namespace cellsynth
