#include "cellsynth/texture_diffusion.hpp"

#include <cmath>
#include <optional>

#include "cellsynth/checkpoint.hpp"

namespace cellsynth {

namespace {

constexpr const char* kNetPrefix = "texture";

GrayImage to_model_range(const GrayImage& img) {
    GrayImage out = img;
    for (auto& v : out.pixels) v = 2.0f * v - 1.0f;
    return out;
}

TextureModelConfig normalized(TextureModelConfig cfg) {
    cfg.unet.in_channels = 1;
    cfg.unet.out_channels = 1;
    cfg.unet.attention_levels.clear();
    cfg.unet.extra_embedding_features = 0;
    return cfg;
}

TextureModelConfig config_from_header(const Json& h) {
    TextureModelConfig cfg;
    cfg.image_size = h.at("image_size").get<int>();
    cfg.unet = h.at("unet").get<nn::UNetConfig>();
    return cfg;
}

template <class Step>
TrainingLog run_training(nn::ParameterStore& ps, const TrainOptions& opts, const char* what, Step&& step) {
    nn::Adam adam(ps.params(), {.lr = float(opts.learning_rate)});
    std::optional<nn::Ema> ema;
    if (opts.ema_decay > 0.0) ema.emplace(ps.params(), float(opts.ema_decay));
    TrainingLog log;
    for (int s = 0; s < opts.steps; ++s) {
        nn::Var loss = step();
        const double value = loss.item();
        if (!std::isfinite(value))
            throw OptimizationFailure(std::string(what) + " loss diverged at step " + std::to_string(s));
        loss.backward();
        adam.step();
        if (ema) ema->update();
        log.losses.push_back(value);
        if (opts.on_step) opts.on_step(s, value);
    }
    if (ema) ema->copy_to_params();
    return log;
}

}  // namespace

TextureBase::TextureBase(const TextureModelConfig& cfg, DiffusionSchedule sched, std::uint64_t init_seed)
    : cfg_(normalized(cfg)), sched_(std::move(sched)), ps_(std::make_shared<nn::ParameterStore>()) {
    Rng rng(init_seed);
    net_ = nn::UNet(*ps_, kNetPrefix, cfg_.unet, rng);
}

nn::Var TextureBase::forward(const nn::Var& x_t, const std::vector<int>& timesteps) const {
    return net_.forward({.x = x_t, .timesteps = timesteps});
}

Array TextureBase::predict_noise(const Array& x_t, int t) const {
    nn::NoGradGuard ng;
    return forward(nn::Var::constant(x_t), std::vector<int>(static_cast<std::size_t>(x_t.dim(0)), t)).to_array();
}

void TextureBase::save(const std::filesystem::path& path) const {
    save_checkpoint(path,
                    {{"kind", "texture-base"},
                     {"image_size", cfg_.image_size},
                     {"unet", cfg_.unet},
                     {"schedule", schedule_to_json(sched_)}},
                    *ps_);
}

TextureBase TextureBase::load(const std::filesystem::path& path) {
    const Json h = read_checkpoint_header(path);
    if (h.value("kind", "") != "texture-base") throw InputError("not a texture base checkpoint: " + path.string());
    TextureBase m(config_from_header(h), schedule_from_json(h.at("schedule")), 0);
    load_checkpoint(path, *m.ps_);
    return m;
}

ConditionalTextureModel::ConditionalTextureModel(const TextureModelConfig& cfg, DiffusionSchedule sched,
                                                 std::uint64_t init_seed)
    : cfg_(normalized(cfg)), sched_(std::move(sched)), ps_(std::make_shared<nn::ParameterStore>()) {
    Rng rng(init_seed);
    net_ = nn::UNet(*ps_, kNetPrefix, cfg_.unet, rng);
    adapter_ = nn::ConditionAdapter(*ps_, "adapter", cfg_.unet, 1, rng);
}

nn::Var ConditionalTextureModel::forward(const nn::Var& x_t, const std::vector<int>& timesteps, const Array* masks,
                                         const std::vector<float>* keep) const {
    if (!masks) return net_.forward({.x = x_t, .timesteps = timesteps});
    if (masks->shape != x_t.shape()) throw ContractViolation("texture model: mask batch must match the image batch");
    std::vector<nn::Var> inj = adapter_.forward(nn::Var::constant(*masks));
    if (keep)
        for (auto& v : inj) v = nn::scale_samples(v, *keep);
    return net_.forward({.x = x_t, .timesteps = timesteps, .injections = &inj});
}

Array ConditionalTextureModel::predict_noise(const Array& x_t, int t, const Array* condition) const {
    nn::NoGradGuard ng;
    return forward(nn::Var::constant(x_t), std::vector<int>(static_cast<std::size_t>(x_t.dim(0)), t), condition)
        .to_array();
}

Denoiser ConditionalTextureModel::denoiser() const {
    return [this](const Array& x, int t, const Array* c) { return predict_noise(x, t, c); };
}

void ConditionalTextureModel::initialize_from(const TextureBase& base) {
    if (base.config().image_size != cfg_.image_size)
        throw ContractViolation("texture base and conditional model differ in image size");
    const std::size_t copied = ps_->copy_from(base.parameters());
    if (copied != base.parameters().params().size())
        throw ContractViolation("texture base architecture does not match the conditional model");
}

void ConditionalTextureModel::save(const std::filesystem::path& path) const {
    save_checkpoint(path,
                    {{"kind", "texture-conditional"},
                     {"image_size", cfg_.image_size},
                     {"unet", cfg_.unet},
                     {"schedule", schedule_to_json(sched_)}},
                    *ps_);
}

ConditionalTextureModel ConditionalTextureModel::load(const std::filesystem::path& path) {
    const Json h = read_checkpoint_header(path);
    if (h.value("kind", "") != "texture-conditional")
        throw InputError("not a conditional texture checkpoint: " + path.string());
    ConditionalTextureModel m(config_from_header(h), schedule_from_json(h.at("schedule")), 0);
    load_checkpoint(path, *m.ps_);
    return m;
}

TrainingLog pretrain_base(TextureBase& base, const std::vector<GrayImage>& corpus, const TrainOptions& opts) {
    if (corpus.empty()) throw InputError("texture corpus is empty");
    const int size = base.config().image_size;
    std::vector<GrayImage> data;
    for (const auto& img : corpus) {
        if (img.width != size || img.height != size)
            throw InputError("texture crop does not match model size " + std::to_string(size));
        data.push_back(to_model_range(img));
    }
    Rng rng(opts.seed);
    return run_training(base.parameters(), opts, "texture base", [&] {
        std::vector<GrayImage> batch;
        for (int b = 0; b < opts.batch_size; ++b)
            batch.push_back(data[std::size_t(rng.uniform_int(0, int(data.size()) - 1))]);
        NoisyBatch nb = make_noisy_batch(stack_images(batch), base.schedule(), rng);
        return nn::mse(base.forward(nn::Var::constant(nb.x_t), nb.timesteps), nb.eps.data);
    });
}

FinetuneResult finetune_conditional(const TextureBase& base, const std::vector<TexturePair>& pairs,
                                    const TrainOptions& opts, bool from_scratch) {
    if (pairs.empty()) throw InputError("texture pair corpus is empty");
    const int size = base.config().image_size;
    std::vector<GrayImage> images, masks;
    for (const auto& p : pairs) {
        if (p.image.width != p.mask.width || p.image.height != p.mask.height)
            throw InputError("image and mask of a training pair differ in size");
        if (p.image.width != size || p.image.height != size)
            throw InputError("training pair does not match model size " + std::to_string(size));
        images.push_back(to_model_range(p.image));
        masks.push_back(to_signed(p.mask));
    }
    FinetuneResult out{ConditionalTextureModel(base.config(), base.schedule(), derive_seed(opts.seed, "texture-init")),
                       {}};
    if (!from_scratch) out.model.initialize_from(base);
    Rng rng(opts.seed);
    auto& model = out.model;
    out.log = run_training(model.parameters(), opts, "texture finetune", [&] {
        std::vector<GrayImage> bi, bm;
        std::vector<float> keep;
        for (int b = 0; b < opts.batch_size; ++b) {
            const std::size_t k = std::size_t(rng.uniform_int(0, int(images.size()) - 1));
            bi.push_back(images[k]);
            bm.push_back(masks[k]);
            keep.push_back(rng.uniform() < opts.condition_dropout ? 0.0f : 1.0f);
        }
        NoisyBatch nb = make_noisy_batch(stack_images(bi), model.schedule(), rng);
        const Array m = stack_images(bm);
        return nn::mse(model.forward(nn::Var::constant(nb.x_t), nb.timesteps, &m, &keep), nb.eps.data);
    });
    return out;
}

Array unique_latent(int slice, const std::vector<int>& shape, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "texture-unique", std::uint64_t(slice)));
    return Array(shape, rng.normal_vector(element_count(shape)));
}

CorrelatedLatentSet make_correlated_latents(int slices, double rho, const std::vector<int>& shape,
                                            std::uint64_t seed) {
    if (slices < 1) throw RangeError("slice count must be at least 1");
    if (!(rho >= 0.0) || !std::isfinite(rho)) throw RangeError("rho must be finite and non-negative");
    CorrelatedLatentSet set;
    set.slices = slices;
    set.rho = rho;
    Rng common_rng(derive_seed(seed, "texture-common"));
    set.common = Array(shape, common_rng.normal_vector(element_count(shape)));
    const double norm = std::sqrt(1.0 + rho * rho);
    const double a = rho / norm, b = 1.0 / norm;
    for (int s = 0; s < slices; ++s) {
        set.unique.push_back(unique_latent(s, shape, seed));
        Array c(shape);
        for (std::size_t i = 0; i < c.size(); ++i)
            c.data[i] = float(a * set.common.data[i] + b * set.unique.back().data[i]);
        set.combined.push_back(std::move(c));
    }
    return set;
}

TextureStack generate_texture(const ConditionalTextureModel& model, const MaskStack& masks,
                              const CorrelatedLatentSet& latents, const SamplerConfig& cfg) {
    if (cfg.eta != 0.0) throw ConfigurationError("texture sampling requires eta = 0");
    const int s = int(masks.slices.size());
    if (latents.slices != s || int(latents.combined.size()) != s)
        throw ContractViolation("latent set has " + std::to_string(latents.slices) + " slices, mask stack has " +
                                std::to_string(s));
    if (s == 0) return {};
    const int size = model.config().image_size;
    std::vector<GrayImage> cond;
    Array latent({s, 1, size, size});
    const std::size_t hw = std::size_t(size) * size;
    for (int i = 0; i < s; ++i) {
        const auto& m = masks.slices[std::size_t(i)];
        if (m.width != size || m.height != size)
            throw ContractViolation("mask slice does not match model size " + std::to_string(size));
        if (latents.combined[std::size_t(i)].size() != hw)
            throw ContractViolation("latent does not match model size " + std::to_string(size));
        cond.push_back(to_signed(m));
        std::copy(latents.combined[std::size_t(i)].data.begin(), latents.combined[std::size_t(i)].data.end(),
                  latent.data.begin() + std::ptrdiff_t(std::size_t(i) * hw));
    }
    const Array c = stack_images(cond);
    const Array x = sample(model.denoiser(), &c, std::move(latent), cfg, model.schedule());
    TextureStack out;
    for (int i = 0; i < s; ++i) {
        GrayImage img = image_from_array(x, i);
        for (auto& v : img.pixels) v = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
        out.slices.push_back(std::move(img));
    }
    return out;
}

double texture_mask_iou(const GrayImage& texture, const MaskImage& mask) {
    if (texture.width != mask.width || texture.height != mask.height)
        throw ContractViolation("texture and mask differ in size");
    return mask_iou(binarize(texture, otsu_threshold(texture.pixels)), mask);
}

double mean_interslice_correlation(const TextureStack& stack) {
    if (stack.slices.size() < 2) throw ContractViolation("inter-slice correlation needs at least two slices");
    double acc = 0.0;
    for (std::size_t s = 0; s + 1 < stack.slices.size(); ++s) {
        const auto& a = stack.slices[s].pixels;
        const auto& b = stack.slices[s + 1].pixels;
        const double n = double(a.size());
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            ma += a[i];
            mb += b[i];
        }
        ma /= n;
        mb /= n;
        double cab = 0, caa = 0, cbb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            cab += (a[i] - ma) * (b[i] - mb);
            caa += (a[i] - ma) * (a[i] - ma);
            cbb += (b[i] - mb) * (b[i] - mb);
        }
        // Two constant slices are perfectly similar.
        acc += (caa > 0 && cbb > 0) ? cab / std::sqrt(caa * cbb) : (caa == cbb ? 1.0 : 0.0);
    }
    return acc / double(stack.slices.size() - 1);
}

}  // namespace cellsynth
