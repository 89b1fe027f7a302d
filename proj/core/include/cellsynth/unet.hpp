#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cellsynth/nn.hpp"

namespace cellsynth::nn {

struct Conv2d {
    Var weight, bias;
    Conv2d() = default;
    Conv2d(ParameterStore& ps, const std::string& name, int in, int out, int k, Rng& rng, bool zero_init = false);
    Var operator()(const Var& x) const { return conv2d(x, weight, bias); }
};

struct Linear {
    Var weight, bias;
    Linear() = default;
    Linear(ParameterStore& ps, const std::string& name, int in, int out, Rng& rng, bool zero_init = false);
    Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 1;
    GroupNorm() = default;
    GroupNorm(ParameterStore& ps, const std::string& name, int channels, int max_groups);
    Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

struct ResBlock {
    GroupNorm norm1, norm2;
    Conv2d conv1, conv2, skip;
    Linear emb_proj;
    bool has_skip = false;
    ResBlock() = default;
    ResBlock(ParameterStore& ps, const std::string& name, int in, int out, int emb_dim, int groups, Rng& rng);
    Var operator()(const Var& x, const Var& emb) const;
};

/// Self-attention over all tokens of a group of views (cross-view attention).
struct ViewAttention {
    GroupNorm norm;
    Linear q, k, v, proj;
    int channels = 0;
    ViewAttention() = default;
    ViewAttention(ParameterStore& ps, const std::string& name, int channels, int groups, Rng& rng);
    Var operator()(const Var& x, int views) const;
};

/// Sinusoidal embedding of integer timesteps -> [N, dim].
Array timestep_embedding(const std::vector<int>& timesteps, int dim);

struct UNetConfig {
    int in_channels = 1;
    int out_channels = 1;
    int base_channels = 16;
    std::vector<int> channel_mults{1, 2, 2};
    int emb_dim = 64;
    int groups = 4;
    /// Levels (0 = full resolution) whose blocks are followed by cross-view attention.
    std::vector<int> attention_levels;
    /// Number of extra per-sample conditioning features fed through an embedding MLP
    /// (e.g. camera pose); 0 disables.
    int extra_embedding_features = 0;
};

/// Residual UNet noise predictor. Input [N, in, H, W] -> [N, out, H, W].
class UNet {
public:
    UNet() = default;
    UNet(ParameterStore& ps, const std::string& prefix, const UNetConfig& cfg, Rng& rng);

    struct Inputs {
        Var x;
        std::vector<int> timesteps;
        /// [N, extra_embedding_features] when configured.
        std::optional<Array> extra{};
        /// Samples per attention group (views per object).
        int views = 1;
        /// Per-level residuals added after each encoder level (conditioning adapter).
        const std::vector<Var>* injections = nullptr;
    };

    Var forward(const Inputs& in) const;
    const UNetConfig& config() const { return cfg_; }
    int levels() const { return int(cfg_.channel_mults.size()); }
    int level_channels(int level) const { return cfg_.base_channels * cfg_.channel_mults.at(std::size_t(level)); }

private:
    bool attends(int level) const;

    UNetConfig cfg_;
    Linear temb1_, temb2_, xemb1_, xemb2_;
    Conv2d conv_in_, conv_out_;
    GroupNorm norm_out_;
    std::vector<ResBlock> down_, up_;
    std::vector<ViewAttention> down_attn_, up_attn_;
    ResBlock mid_;
    std::optional<ViewAttention> mid_attn_;
};

/// Multi-scale conditioning encoder whose per-level outputs pass through
/// zero-initialised 1x1 convolutions; used to inject a mask into a UNet.
class ConditionAdapter {
public:
    ConditionAdapter() = default;
    ConditionAdapter(ParameterStore& ps, const std::string& prefix, const UNetConfig& target, int cond_channels, Rng& rng);
    std::vector<Var> forward(const Var& condition) const;

private:
    std::vector<Conv2d> stem_;
    std::vector<Conv2d> zero_;
};

}  // namespace cellsynth::nn
