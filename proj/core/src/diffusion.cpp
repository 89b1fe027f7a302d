#include "cellsynth/diffusion.hpp"

#include <cmath>
#include <string>

namespace cellsynth {

DiffusionSchedule DiffusionSchedule::linear(int num_timesteps, double beta_start, double beta_end) {
    if (num_timesteps < 1) throw RangeError("schedule needs at least one timestep");
    std::vector<double> betas(static_cast<std::size_t>(num_timesteps));
    for (int t = 0; t < num_timesteps; ++t)
        betas[std::size_t(t)] =
            num_timesteps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / double(num_timesteps - 1);
    return from_betas(std::move(betas));
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw RangeError("schedule needs at least one timestep");
    DiffusionSchedule s;
    s.num_timesteps = int(betas.size());
    s.beta = std::move(betas);
    double prod = 1.0;
    for (double b : s.beta) {
        if (!(b > 0.0 && b < 1.0)) throw RangeError("beta must lie in (0, 1), got " + std::to_string(b));
        s.alpha.push_back(1.0 - b);
        prod *= 1.0 - b;
        s.alpha_bar.push_back(prod);
    }
    return s;
}

Array forward_diffuse(const Array& x0, const NoiseTensor& eps, double alpha_bar) {
    if (!x0.same_shape(eps))
        throw ContractViolation("forward_diffuse: noise shape " + shape_string(eps.shape) + " != image shape " +
                                shape_string(x0.shape));
    const float a = float(std::sqrt(alpha_bar)), b = float(std::sqrt(1.0 - alpha_bar));
    Array out(x0.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

Array forward_diffuse(const Array& x0, int t, const NoiseTensor& eps, const DiffusionSchedule& sched) {
    if (t < 0 || t >= sched.num_timesteps)
        throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.num_timesteps) + ")");
    return forward_diffuse(x0, eps, sched.alpha_bar[std::size_t(t)]);
}

Array predict_x0(const Array& x_t, const Array& predicted_noise, double alpha_bar) {
    if (!(alpha_bar > 0.0)) throw RangeError("alpha_bar must be positive to invert the forward process");
    if (!x_t.same_shape(predicted_noise)) throw ContractViolation("predict_x0: shape mismatch");
    const double sa = std::sqrt(alpha_bar), sb = std::sqrt(1.0 - alpha_bar);
    Array out(x_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = float((double(x_t.data[i]) - sb * predicted_noise.data[i]) / sa);
    return out;
}

Array ddim_update(const Array& x_t, const Array& predicted_noise, double alpha_bar_t, double alpha_bar_prev,
                  double eta, Rng* noise, bool clip_denoised) {
    if (eta < 0.0) throw RangeError("eta must be non-negative");
    Array x0 = predict_x0(x_t, predicted_noise, alpha_bar_t);
    if (clip_denoised)
        for (auto& v : x0.data) v = std::clamp(v, -1.0f, 1.0f);
    double sigma = 0.0;
    if (eta > 0.0 && alpha_bar_t < 1.0)
        sigma = eta * std::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) *
                std::sqrt(std::max(0.0, 1.0 - alpha_bar_t / alpha_bar_prev));
    // With clipping the direction uses the noise implied by the clipped x0.
    Array eps = predicted_noise;
    if (clip_denoised && alpha_bar_t < 1.0) {
        const double sa = std::sqrt(alpha_bar_t), sb = std::sqrt(1.0 - alpha_bar_t);
        for (std::size_t i = 0; i < eps.size(); ++i) eps.data[i] = float((x_t.data[i] - sa * x0.data[i]) / sb);
    }
    const double a = std::sqrt(alpha_bar_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - alpha_bar_prev - sigma * sigma));
    Array out(x_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = float(a * x0.data[i] + dir * eps.data[i]);
    if (sigma > 0.0) {
        if (!noise) throw ContractViolation("ddim_update: eta > 0 requires a noise generator");
        for (auto& v : out.data) v += float(sigma * noise->normal());
    }
    return out;
}

Array ddim_step(const Array& x_t, const Array& predicted_noise, int t, int t_prev, const DiffusionSchedule& sched,
                double eta, Rng* noise, bool clip_denoised) {
    if (t < 0 || t >= sched.num_timesteps) throw RangeError("ddim_step: t out of range");
    if (t_prev >= t || t_prev < -1) throw RangeError("ddim_step: t_prev must satisfy -1 <= t_prev < t");
    const double ab_prev = t_prev < 0 ? 1.0 : sched.alpha_bar[std::size_t(t_prev)];
    return ddim_update(x_t, predicted_noise, sched.alpha_bar[std::size_t(t)], ab_prev, eta, noise, clip_denoised);
}

std::vector<int> strided_timesteps(int num_timesteps, int num_inference_steps) {
    if (num_inference_steps < 1 || num_inference_steps > num_timesteps)
        throw RangeError("inference steps must lie in [1, " + std::to_string(num_timesteps) + "]");
    const int stride = num_timesteps / num_inference_steps;
    std::vector<int> ts;
    for (int i = num_inference_steps - 1; i >= 0; --i) ts.push_back(i * stride);
    return ts;
}

Array sample(const Denoiser& model, const Array* condition, Array latent0, const SamplerConfig& cfg,
             const DiffusionSchedule& sched) {
    const auto ts = strided_timesteps(sched.num_timesteps, cfg.num_inference_steps);
    Rng noise(cfg.seed);
    Array x = std::move(latent0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        Array eps;
        if (!condition) {
            eps = model(x, t, nullptr);
        } else if (cfg.guidance_scale == 1.0) {
            eps = model(x, t, condition);
        } else {
            Array uncond = model(x, t, nullptr);
            if (cfg.guidance_scale == 0.0) {
                eps = std::move(uncond);
            } else {
                Array cond = model(x, t, condition);
                if (!cond.same_shape(uncond)) throw ContractViolation("sample: conditional output shape mismatch");
                eps = uncond;
                const float g = float(cfg.guidance_scale);
                for (std::size_t k = 0; k < eps.size(); ++k) eps.data[k] += g * (cond.data[k] - uncond.data[k]);
            }
        }
        if (!eps.same_shape(x))
            throw ContractViolation("sample: model output " + shape_string(eps.shape) + " does not match latent " +
                                    shape_string(x.shape));
        x = ddim_step(x, eps, t, t_prev, sched, cfg.eta, &noise, cfg.clip_denoised);
    }
    return x;
}

NoisyBatch make_noisy_batch(const Array& x0, const DiffusionSchedule& sched, Rng& rng) {
    if (x0.shape.empty() || x0.shape[0] < 1) throw ContractViolation("make_noisy_batch: empty batch");
    const int n = x0.shape[0];
    const std::size_t per = x0.size() / std::size_t(n);
    NoisyBatch b;
    b.eps = Array(x0.shape, rng.normal_vector(x0.size()));
    b.x_t = Array(x0.shape);
    for (int i = 0; i < n; ++i) {
        const int t = rng.uniform_int(0, sched.num_timesteps - 1);
        b.timesteps.push_back(t);
        const float a = float(std::sqrt(sched.alpha_bar[std::size_t(t)]));
        const float s = float(std::sqrt(1.0 - sched.alpha_bar[std::size_t(t)]));
        for (std::size_t k = i * per; k < (i + 1) * per; ++k) b.x_t.data[k] = a * x0.data[k] + s * b.eps.data[k];
    }
    return b;
}

std::vector<double> TrainingLog::window_means(int window) const {
    std::vector<double> out;
    if (window < 1) return out;
    for (std::size_t i = 0; i < losses.size(); i += std::size_t(window)) {
        const std::size_t end = std::min(losses.size(), i + std::size_t(window));
        double acc = 0.0;
        for (std::size_t k = i; k < end; ++k) acc += losses[k];
        out.push_back(acc / double(end - i));
    }
    return out;
}

double TrainingLog::head_mean(int n) const {
    const std::size_t k = std::min(losses.size(), std::size_t(std::max(n, 1)));
    if (k == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += losses[i];
    return acc / double(k);
}

double TrainingLog::tail_mean(int n) const {
    const std::size_t k = std::min(losses.size(), std::size_t(std::max(n, 1)));
    if (k == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = losses.size() - k; i < losses.size(); ++i) acc += losses[i];
    return acc / double(k);
}

}  // namespace cellsynth
