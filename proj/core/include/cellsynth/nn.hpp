#pragma once

// Small define-by-run reverse-mode autodiff over float tensors in NCHW layout.
// Sized for desk-scale diffusion models and coordinate MLPs on a CPU.

#include <functional>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "cellsynth/common.hpp"

namespace cellsynth::nn {

// Vectorised kernels peel to a cache-line boundary, so float results depend on where a
// buffer starts. Tensor storage is therefore always 64-byte aligned.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<float, AlignedAllocator<float>>;

struct Node {
    std::vector<int> shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Accumulates this node's grad into its inputs' grads.
    std::function<void(Node&)> backward;

    Buffer& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    static Var constant(const Array& a);
    static Var constant(std::vector<int> shape, std::vector<float> values);
    static Var parameter(std::vector<int> shape, std::vector<float> values);

    const std::vector<int>& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    const Buffer& value() const { return node_->value; }
    Buffer& mutable_value() { return node_->value; }
    const Buffer& grad() const { return node_->grad; }
    Buffer& mutable_grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    float item() const;
    Array to_array() const { return Array(node_->shape, {node_->value.begin(), node_->value.end()}); }

    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return bool(node_); }

    /// Back-propagates from a scalar node.
    void backward() const;
    void zero_grad() const;

private:
    NodePtr node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Elementwise (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
/// a * s where s is a single-element Var.
Var mul_scalar(const Var& a, const Var& s);
Var square(const Var& a);

Var silu(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a, float beta = 1.0f);

/// x: [N, C, ...], e: [N, C]; adds e[n, c] over all trailing positions.
Var add_channel(const Var& x, const Var& e);
/// x: [N, C, ...], m: per-sample multiplier of N elements (constant).
Var scale_samples(const Var& x, const std::vector<float>& m);

Var reshape(const Var& a, std::vector<int> shape);
Var concat_channels(const Var& a, const Var& b);
/// Rows [begin, end) along dim 0.
Var slice_rows(const Var& a, int begin, int end);

/// x: [N, Ci, H, W], w: [Co, Ci, k, k], b: [Co]; stride 1, zero padding k/2.
Var conv2d(const Var& x, const Var& w, const Var& b);
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);

/// x: [M, K] (or [..., K]), w: [K, N], b: [N] or empty.
Var linear(const Var& x, const Var& w, const Var& b);

/// [B*V, C, h, w] -> [B, V*h*w, C] and back.
Var to_tokens(const Var& x, int views);
Var from_tokens(const Var& t, int views, int channels, int height, int width);
/// Single-head scaled dot-product attention; q, k, v: [B, L, C].
Var attention(const Var& q, const Var& k, const Var& v);

/// Euclidean norm of each row of [P, D] -> [P].
Var row_norm(const Var& x, float eps = 1e-12f);

Var sum(const Var& a);
Var mean(const Var& a);
/// mean((a - target)^2); target is treated as constant.
Var mse(const Var& a, const std::vector<float>& target);
/// Per-row mean squared error for [B, ...] -> [B].
Var mse_rows(const Var& a, const std::vector<float>& target);
/// Binary cross-entropy on probabilities, clamped away from {0, 1}.
Var bce(const Var& p, const std::vector<float>& target);

/// Discrete SDF-to-opacity volume rendering along rays.
/// sdf: [R, K] values at ordered samples, s: [1] logistic sharpness.
/// alpha_i = clamp((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0, 1), Phi(x) = sigmoid(s x);
/// returns opacity 1 - prod_i (1 - alpha_i) per ray.
Var sdf_opacity(const Var& sdf, const Var& s);

/// Ordered parameter registry. Order is the checkpoint order.
class ParameterStore {
public:
    Var& create(const std::string& name, std::vector<int> shape, std::vector<float> values);
    std::vector<Var>& params() { return params_; }
    const std::vector<Var>& params() const { return params_; }
    const std::vector<std::string>& names() const { return names_; }
    std::size_t count() const;
    Var* find(const std::string& name);
    void zero_grad();
    /// Copies values of same-named, same-shaped parameters from other. Returns count copied.
    std::size_t copy_from(const ParameterStore& other);

private:
    std::vector<Var> params_;
    std::vector<std::string> names_;
};

/// Kaiming-uniform style init for a fan_in.
std::vector<float> init_uniform(std::size_t n, int fan_in, Rng& rng, float gain = 1.0f);

class Adam {
public:
    struct Options {
        float lr = 1e-3f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float eps = 1e-8f;
        float clip_norm = 1.0f;  // <= 0 disables global-norm clipping
    };

    Adam(std::vector<Var> params, Options options);
    /// Applies one update from accumulated grads, then zeroes them. Returns the pre-clip grad norm.
    float step();
    const Options& options() const { return opt_; }
    void set_lr(float lr) { opt_.lr = lr; }

private:
    std::vector<Var> params_;
    std::vector<std::vector<float>> m_, v_;
    Options opt_;
    long t_ = 0;
};

/// Exponential moving average of parameter values.
class Ema {
public:
    Ema(std::vector<Var> params, float decay);
    void update();
    /// Overwrites the tracked parameters with the averaged values.
    void copy_to_params() const;

private:
    std::vector<Var> params_;
    std::vector<std::vector<float>> shadow_;
    float decay_;
    long updates_ = 0;
};

}  // namespace cellsynth::nn
