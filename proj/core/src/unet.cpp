#include "cellsynth/unet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cellsynth::nn {

Conv2d::Conv2d(ParameterStore& ps, const std::string& name, int in, int out, int k, Rng& rng, bool zero_init) {
    const std::size_t n = std::size_t(out) * in * k * k;
    weight = ps.create(name + ".w", {out, in, k, k},
                       zero_init ? std::vector<float>(n, 0.0f) : init_uniform(n, in * k * k, rng));
    bias = ps.create(name + ".b", {out}, std::vector<float>(std::size_t(out), 0.0f));
}

Linear::Linear(ParameterStore& ps, const std::string& name, int in, int out, Rng& rng, bool zero_init) {
    const std::size_t n = std::size_t(in) * out;
    weight = ps.create(name + ".w", {in, out}, zero_init ? std::vector<float>(n, 0.0f) : init_uniform(n, in, rng));
    bias = ps.create(name + ".b", {out}, std::vector<float>(std::size_t(out), 0.0f));
}

GroupNorm::GroupNorm(ParameterStore& ps, const std::string& name, int channels, int max_groups) {
    groups = std::gcd(channels, std::max(1, max_groups));
    gamma = ps.create(name + ".g", {channels}, std::vector<float>(std::size_t(channels), 1.0f));
    beta = ps.create(name + ".b", {channels}, std::vector<float>(std::size_t(channels), 0.0f));
}

ResBlock::ResBlock(ParameterStore& ps, const std::string& name, int in, int out, int emb_dim, int groups, Rng& rng)
    : norm1(ps, name + ".n1", in, groups),
      norm2(ps, name + ".n2", out, groups),
      conv1(ps, name + ".c1", in, out, 3, rng),
      conv2(ps, name + ".c2", out, out, 3, rng),
      emb_proj(ps, name + ".e", emb_dim, out, rng),
      has_skip(in != out) {
    if (has_skip) skip = Conv2d(ps, name + ".s", in, out, 1, rng);
}

Var ResBlock::operator()(const Var& x, const Var& emb) const {
    Var h = conv1(silu(norm1(x)));
    h = add_channel(h, emb_proj(silu(emb)));
    h = conv2(silu(norm2(h)));
    return add(has_skip ? skip(x) : x, h);
}

ViewAttention::ViewAttention(ParameterStore& ps, const std::string& name, int c, int groups, Rng& rng)
    : norm(ps, name + ".n", c, groups),
      q(ps, name + ".q", c, c, rng),
      k(ps, name + ".k", c, c, rng),
      v(ps, name + ".v", c, c, rng),
      proj(ps, name + ".p", c, c, rng, /*zero_init=*/true),
      channels(c) {}

Var ViewAttention::operator()(const Var& x, int views) const {
    const int h = x.dim(2), w = x.dim(3);
    Var t = to_tokens(norm(x), views);
    Var o = proj(attention(q(t), k(t), v(t)));
    return add(x, from_tokens(o, views, channels, h, w));
}

Array timestep_embedding(const std::vector<int>& timesteps, int dim) {
    const int half = dim / 2;
    Array out({int(timesteps.size()), dim});
    for (std::size_t n = 0; n < timesteps.size(); ++n)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double arg = timesteps[n] * freq;
            out.data[n * dim + i] = float(std::sin(arg));
            out.data[n * dim + half + i] = float(std::cos(arg));
        }
    return out;
}

UNet::UNet(ParameterStore& ps, const std::string& prefix, const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.channel_mults.empty()) throw ContractViolation("UNet needs at least one level");
    const int e = cfg.emb_dim;
    const std::string p = prefix + ".";
    temb1_ = Linear(ps, p + "temb1", e, e, rng);
    temb2_ = Linear(ps, p + "temb2", e, e, rng);
    if (cfg.extra_embedding_features > 0) {
        xemb1_ = Linear(ps, p + "xemb1", cfg.extra_embedding_features, e, rng);
        xemb2_ = Linear(ps, p + "xemb2", e, e, rng);
    }
    conv_in_ = Conv2d(ps, p + "in", cfg.in_channels, cfg.base_channels, 3, rng);
    int ch = cfg.base_channels;
    for (int l = 0; l < levels(); ++l) {
        const int out = level_channels(l);
        down_.emplace_back(ps, p + "down" + std::to_string(l), ch, out, e, cfg.groups, rng);
        down_attn_.push_back(attends(l) ? ViewAttention(ps, p + "dattn" + std::to_string(l), out, cfg.groups, rng)
                                        : ViewAttention{});
        ch = out;
    }
    mid_ = ResBlock(ps, p + "mid", ch, ch, e, cfg.groups, rng);
    if (attends(levels() - 1)) mid_attn_.emplace(ps, p + "mattn", ch, cfg.groups, rng);
    up_.resize(std::size_t(levels()));
    up_attn_.resize(std::size_t(levels()));
    for (int l = levels() - 1; l >= 0; --l) {
        const int out = level_channels(l);
        up_[std::size_t(l)] = ResBlock(ps, p + "up" + std::to_string(l), ch + out, out, e, cfg.groups, rng);
        if (attends(l)) up_attn_[std::size_t(l)] = ViewAttention(ps, p + "uattn" + std::to_string(l), out, cfg.groups, rng);
        ch = out;
    }
    norm_out_ = GroupNorm(ps, p + "nout", ch, cfg.groups);
    conv_out_ = Conv2d(ps, p + "out", ch, cfg.out_channels, 3, rng, /*zero_init=*/true);
}

bool UNet::attends(int level) const {
    return std::find(cfg_.attention_levels.begin(), cfg_.attention_levels.end(), level) != cfg_.attention_levels.end();
}

Var UNet::forward(const Inputs& in) const {
    const auto& xs = in.x.shape();
    if (xs.size() != 4 || xs[1] != cfg_.in_channels)
        throw ContractViolation("UNet: expected [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                                shape_string(xs));
    if (int(in.timesteps.size()) != xs[0]) throw ContractViolation("UNet: one timestep per sample required");
    const int down_factor = 1 << (levels() - 1);
    if (xs[2] % down_factor || xs[3] % down_factor)
        throw ContractViolation("UNet: spatial size must be divisible by " + std::to_string(down_factor));
    if (in.injections && int(in.injections->size()) != levels())
        throw ContractViolation("UNet: injection count must equal level count");

    Var emb = temb2_(silu(temb1_(Var::constant(timestep_embedding(in.timesteps, cfg_.emb_dim)))));
    if (cfg_.extra_embedding_features > 0) {
        if (!in.extra || in.extra->shape != std::vector<int>{xs[0], cfg_.extra_embedding_features})
            throw ContractViolation("UNet: extra embedding features missing or misshaped");
        emb = add(emb, xemb2_(silu(xemb1_(Var::constant(*in.extra)))));
    }

    Var h = conv_in_(in.x);
    std::vector<Var> skips;
    for (int l = 0; l < levels(); ++l) {
        h = down_[std::size_t(l)](h, emb);
        if (attends(l)) h = down_attn_[std::size_t(l)](h, in.views);
        if (in.injections) h = add(h, (*in.injections)[std::size_t(l)]);
        skips.push_back(h);
        if (l + 1 < levels()) h = avg_pool2(h);
    }
    h = mid_(h, emb);
    if (mid_attn_) h = (*mid_attn_)(h, in.views);
    for (int l = levels() - 1; l >= 0; --l) {
        h = up_[std::size_t(l)](concat_channels(h, skips[std::size_t(l)]), emb);
        if (attends(l)) h = up_attn_[std::size_t(l)](h, in.views);
        if (l > 0) h = upsample2(h);
    }
    return conv_out_(silu(norm_out_(h)));
}

ConditionAdapter::ConditionAdapter(ParameterStore& ps, const std::string& prefix, const UNetConfig& target,
                                   int cond_channels, Rng& rng) {
    int ch = cond_channels;
    for (std::size_t l = 0; l < target.channel_mults.size(); ++l) {
        const int out = target.base_channels * target.channel_mults[l];
        stem_.emplace_back(ps, prefix + ".stem" + std::to_string(l), ch, out, 3, rng);
        zero_.emplace_back(ps, prefix + ".zero" + std::to_string(l), out, out, 1, rng, /*zero_init=*/true);
        ch = out;
    }
}

std::vector<Var> ConditionAdapter::forward(const Var& condition) const {
    std::vector<Var> out;
    Var h = condition;
    for (std::size_t l = 0; l < stem_.size(); ++l) {
        if (l > 0) h = avg_pool2(h);
        h = silu(stem_[l](h));
        out.push_back(zero_[l](h));
    }
    return out;
}

}  // namespace cellsynth::nn
