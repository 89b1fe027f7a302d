#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cellsynth/common.hpp"

namespace cellsynth {

/// Discrete forward-process schedule: beta[t], alpha[t] = 1 - beta[t], alpha_bar[t] = prod alpha.
struct DiffusionSchedule {
    int num_timesteps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    /// Linearly spaced betas, the usual DDPM default.
    static DiffusionSchedule linear(int num_timesteps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);
    static DiffusionSchedule from_betas(std::vector<double> betas);
};

struct SamplerConfig {
    int num_inference_steps = 50;
    double eta = 0.0;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
    /// Clamp the x0 estimate to [-1, 1] at every step (data lives in that range).
    bool clip_denoised = false;
};

using NoiseTensor = Array;

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps
Array forward_diffuse(const Array& x0, const NoiseTensor& eps, double alpha_bar);
Array forward_diffuse(const Array& x0, int t, const NoiseTensor& eps, const DiffusionSchedule& sched);

/// x0 estimate (x_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar).
Array predict_x0(const Array& x_t, const Array& predicted_noise, double alpha_bar);

/// One DDIM update between cumulative alphas. `noise` is consumed only when eta > 0.
Array ddim_update(const Array& x_t, const Array& predicted_noise, double alpha_bar_t, double alpha_bar_prev,
                  double eta, Rng* noise = nullptr, bool clip_denoised = false);

/// DDIM step from t to t_prev; t_prev = -1 denotes the clean endpoint (alpha_bar = 1).
Array ddim_step(const Array& x_t, const Array& predicted_noise, int t, int t_prev, const DiffusionSchedule& sched,
                double eta, Rng* noise = nullptr, bool clip_denoised = false);

/// Uniformly strided timesteps in descending order, e.g. T=1000, n=50 -> 980, 960, ..., 0.
std::vector<int> strided_timesteps(int num_timesteps, int num_inference_steps);

/// Noise predictor: (x_t, t, condition or nullptr) -> predicted noise shaped like x_t.
using Denoiser = std::function<Array(const Array& x_t, int t, const Array* condition)>;

/// DDIM sampling from latent0 with optional classifier-free guidance:
/// eps = eps_uncond + guidance_scale * (eps_cond - eps_uncond).
Array sample(const Denoiser& model, const Array* condition, Array latent0, const SamplerConfig& cfg,
             const DiffusionSchedule& sched);

/// A batch of noised training inputs: x_t per sample with its own t and target noise.
struct NoisyBatch {
    Array x_t;
    NoiseTensor eps;
    std::vector<int> timesteps;
};

/// Draws one timestep per leading-dimension sample and noises x0 accordingly.
NoisyBatch make_noisy_batch(const Array& x0, const DiffusionSchedule& sched, Rng& rng);

struct TrainOptions {
    int steps = 1000;
    int batch_size = 16;
    double learning_rate = 2e-3;
    std::uint64_t seed = 0;
    /// Probability of dropping the condition for a sample (conditional models only).
    double condition_dropout = 0.1;
    /// Decay of the weight average swapped in after training; 0 keeps the raw weights.
    double ema_decay = 0.0;
    /// Called after every optimizer step with the step index and its loss.
    std::function<void(int, double)> on_step;
};

struct TrainingLog {
    std::vector<double> losses;

    /// Mean loss over consecutive windows of `window` steps (e.g. one epoch).
    std::vector<double> window_means(int window) const;
    double head_mean(int n) const;
    double tail_mean(int n) const;
};

}  // namespace cellsynth
