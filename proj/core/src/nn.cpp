#include "cellsynth/nn.hpp"

#include <malloc.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace cellsynth::nn {

namespace {

thread_local bool g_grad_enabled = true;

// Per-step activation and im2col buffers are large and short-lived; serving them from the
// heap rather than fresh mmap pages removes page-fault time that otherwise dominates.
[[maybe_unused]] const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

using BackwardFn = std::function<void(Node&)>;

Var make_result(std::vector<int> shape, Buffer value, std::initializer_list<Var> inputs,
                BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& in : inputs) node->inputs.push_back(in.node());
            node->backward = std::move(fn);
        }
    }
    return Var(std::move(node));
}

void check_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

std::size_t trailing(const std::vector<int>& shape, std::size_t from) {
    std::size_t n = 1;
    for (std::size_t i = from; i < shape.size(); ++i) n *= std::size_t(shape[i]);
    return n;
}

template <class F, class G>
Var unary(const Var& a, F forward, G derivative) {
    Buffer out(a.size());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i]);
    return make_result(a.shape(), std::move(out), {a}, [derivative](Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * derivative(in.value[i], self.value[i]);
    });
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var Var::constant(const Array& a) { return constant(a.shape, a.data); }

Var Var::constant(std::vector<int> shape, std::vector<float> values) {
    if (values.size() != element_count(shape)) throw ContractViolation("Var::constant: size/shape mismatch");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value.assign(values.begin(), values.end());
    return Var(std::move(node));
}

Var Var::parameter(std::vector<int> shape, std::vector<float> values) {
    Var v = constant(std::move(shape), std::move(values));
    v.node_->requires_grad = true;
    return v;
}

float Var::item() const {
    if (node_->value.size() != 1) throw ContractViolation("Var::item on non-scalar " + shape_string(shape()));
    return node_->value[0];
}

void Var::zero_grad() const {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Var::backward() const {
    if (!node_ || !node_->requires_grad) return;
    if (node_->value.size() != 1) throw ContractViolation("backward() requires a scalar output");

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && child->backward && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->ensure_grad()[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Free intermediate grads so a retained graph does not double count.
    for (Node* n : order)
        if (n->backward) Buffer().swap(n->grad);
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (self.inputs[0]->requires_grad) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& g = self.inputs[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        auto& x = *self.inputs[0];
        auto& y = *self.inputs[1];
        if (x.requires_grad) {
            auto& g = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
        }
        if (y.requires_grad) {
            auto& g = y.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
        }
    });
}

Var scale(const Var& a, float s) {
    return unary(a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Var add_scalar(const Var& a, float s) {
    return unary(a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Var mul_scalar(const Var& a, const Var& s) {
    if (s.size() != 1) throw ContractViolation("mul_scalar: scale must have one element");
    const float k = s.value()[0];
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * k;
    return make_result(a.shape(), std::move(out), {a, s}, [](Node& self) {
        auto& x = *self.inputs[0];
        auto& k = *self.inputs[1];
        if (x.requires_grad) {
            auto& g = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * k.value[0];
        }
        if (k.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < x.value.size(); ++i) acc += double(self.grad[i]) * x.value[i];
            k.ensure_grad()[0] += float(acc);
        }
    });
}

Var square(const Var& a) {
    return unary(a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Var silu(const Var& a) {
    return unary(
        a, [](float x) { return x / (1.0f + std::exp(-x)); },
        [](float x, float) {
            const float s = 1.0f / (1.0f + std::exp(-x));
            return s * (1.0f + x * (1.0f - s));
        });
}

Var relu(const Var& a) {
    return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Var sigmoid(const Var& a) {
    return unary(
        a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); }, [](float, float y) { return y * (1.0f - y); });
}

Var softplus(const Var& a, float beta) {
    return unary(
        a,
        [beta](float x) {
            const float z = beta * x;
            return z > 20.0f ? x : std::log1p(std::exp(z)) / beta;
        },
        [beta](float x, float) { return 1.0f / (1.0f + std::exp(-beta * x)); });
}

// ---------------------------------------------------------------- broadcasting / shape

Var add_channel(const Var& x, const Var& e) {
    if (x.shape().size() < 2 || e.shape().size() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(1))
        throw ContractViolation("add_channel: expected x [N,C,...] and e [N,C], got " + shape_string(x.shape()) +
                                " and " + shape_string(e.shape()));
    const std::size_t nc = std::size_t(x.dim(0)) * x.dim(1);
    const std::size_t inner = trailing(x.shape(), 2);
    Buffer out(x.value());
    for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] += e.value()[c];
    return make_result(x.shape(), std::move(out), {x, e}, [nc, inner](Node& self) {
        auto& xi = *self.inputs[0];
        auto& ei = *self.inputs[1];
        if (xi.requires_grad) {
            auto& g = xi.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (ei.requires_grad) {
            auto& g = ei.ensure_grad();
            for (std::size_t c = 0; c < nc; ++c) {
                float acc = 0.0f;
                for (std::size_t i = 0; i < inner; ++i) acc += self.grad[c * inner + i];
                g[c] += acc;
            }
        }
    });
}

Var scale_samples(const Var& x, const std::vector<float>& m) {
    if (m.size() != std::size_t(x.dim(0))) throw ContractViolation("scale_samples: multiplier count mismatch");
    const std::size_t inner = trailing(x.shape(), 1);
    Buffer out(x.value());
    for (std::size_t n = 0; n < m.size(); ++n)
        for (std::size_t i = 0; i < inner; ++i) out[n * inner + i] *= m[n];
    return make_result(x.shape(), std::move(out), {x}, [m, inner](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t n = 0; n < m.size(); ++n)
            for (std::size_t i = 0; i < inner; ++i) g[n * inner + i] += self.grad[n * inner + i] * m[n];
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    if (element_count(shape) != a.size())
        throw ContractViolation("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    return make_result(std::move(shape), a.value(), {a}, [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0] || trailing(sa, 2) != trailing(sb, 2))
        throw ContractViolation("concat_channels: incompatible " + shape_string(sa) + " and " + shape_string(sb));
    const std::size_t n = std::size_t(sa[0]);
    const std::size_t la = trailing(sa, 1), lb = trailing(sb, 1);
    std::vector<int> shape = sa;
    shape[1] = sa[1] + sb[1];
    Buffer out(n * (la + lb));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.value().begin() + std::ptrdiff_t(i * la), la, out.begin() + std::ptrdiff_t(i * (la + lb)));
        std::copy_n(b.value().begin() + std::ptrdiff_t(i * lb), lb, out.begin() + std::ptrdiff_t(i * (la + lb) + la));
    }
    return make_result(std::move(shape), std::move(out), {a, b}, [n, la, lb](Node& self) {
        auto& ai = *self.inputs[0];
        auto& bi = *self.inputs[1];
        for (std::size_t i = 0; i < n; ++i) {
            const float* src = self.grad.data() + i * (la + lb);
            if (ai.requires_grad) {
                float* g = ai.ensure_grad().data() + i * la;
                for (std::size_t j = 0; j < la; ++j) g[j] += src[j];
            }
            if (bi.requires_grad) {
                float* g = bi.ensure_grad().data() + i * lb;
                for (std::size_t j = 0; j < lb; ++j) g[j] += src[la + j];
            }
        }
    });
}

Var slice_rows(const Var& a, int begin, int end) {
    if (begin < 0 || end > a.dim(0) || begin > end) throw RangeError("slice_rows: bad range");
    const std::size_t row = trailing(a.shape(), 1);
    std::vector<int> shape = a.shape();
    shape[0] = end - begin;
    Buffer out(a.value().begin() + std::ptrdiff_t(begin * row), a.value().begin() + std::ptrdiff_t(end * row));
    const std::size_t offset = std::size_t(begin) * row;
    return make_result(std::move(shape), std::move(out), {a}, [offset](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
    });
}

// ---------------------------------------------------------------- convolution

namespace {

// col: [Ci*k*k, N*H*W], column index = n*HW + y*W + x.
void im2col(const float* x, int n, int ci, int h, int w, int k, Buffer& col) {
    const int pad = k / 2;
    const std::size_t hw = std::size_t(h) * w;
    const std::size_t cols = std::size_t(n) * hw;
    col.assign(std::size_t(ci) * k * k * cols, 0.0f);
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                float* dst = col.data() + ((std::size_t(c) * k + ky) * k + kx) * cols;
                for (int b = 0; b < n; ++b) {
                    const float* src = x + (std::size_t(b) * ci + c) * hw;
                    float* d = dst + std::size_t(b) * hw;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        const int x0 = std::max(0, pad - kx), x1 = std::min(w, w + pad - kx);
                        for (int xx = x0; xx < x1; ++xx) d[y * w + xx] = src[sy * w + xx + kx - pad];
                    }
                }
            }
}

void col2im(const float* col, int n, int ci, int h, int w, int k, float* dx) {
    const int pad = k / 2;
    const std::size_t hw = std::size_t(h) * w;
    const std::size_t cols = std::size_t(n) * hw;
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const float* src = col + ((std::size_t(c) * k + ky) * k + kx) * cols;
                for (int b = 0; b < n; ++b) {
                    float* d = dx + (std::size_t(b) * ci + c) * hw;
                    const float* s = src + std::size_t(b) * hw;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        const int x0 = std::max(0, pad - kx), x1 = std::min(w, w + pad - kx);
                        for (int xx = x0; xx < x1; ++xx) d[sy * w + xx + kx - pad] += s[y * w + xx];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0)
        throw ContractViolation("conv2d: incompatible input " + shape_string(xs) + " and weight " + shape_string(ws));
    if (b && b.size() != std::size_t(ws[0])) throw ContractViolation("conv2d: bias size mismatch");
    const int n = xs[0], ci = xs[1], h = xs[2], wd = xs[3], co = ws[0], k = ws[2];
    const std::size_t hw = std::size_t(h) * wd;
    const std::size_t cols = std::size_t(n) * hw;
    const int kk = ci * k * k;

    Buffer col;
    const float* colp;
    if (k == 1) {
        // [N, Ci, HW] -> [Ci, N*HW]
        col.resize(std::size_t(ci) * cols);
        for (int bb = 0; bb < n; ++bb)
            for (int c = 0; c < ci; ++c)
                std::copy_n(x.value().data() + (std::size_t(bb) * ci + c) * hw, hw,
                            col.data() + std::size_t(c) * cols + std::size_t(bb) * hw);
    } else {
        im2col(x.value().data(), n, ci, h, wd, k, col);
    }
    colp = col.data();

    RowMat y(co, cols);
    y.noalias() = CMapMat(w.value().data(), co, kk) * CMapMat(colp, kk, Eigen::Index(cols));
    Buffer out(std::size_t(n) * co * hw);
    for (int bb = 0; bb < n; ++bb)
        for (int c = 0; c < co; ++c) {
            const float bias = b ? b.value()[c] : 0.0f;
            const float* src = y.data() + std::size_t(c) * cols + std::size_t(bb) * hw;
            float* dst = out.data() + (std::size_t(bb) * co + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
        }

    std::initializer_list<Var> inputs = {x, w, b ? b : Var::constant({0}, {})};
    return make_result({n, co, h, wd}, std::move(out), inputs, [=](Node& self) {
        auto& xi = *self.inputs[0];
        auto& wi = *self.inputs[1];
        auto& bi = *self.inputs[2];
        // dY as [Co, N*HW]
        RowMat dy(co, cols);
        for (int bb = 0; bb < n; ++bb)
            for (int c = 0; c < co; ++c)
                std::copy_n(self.grad.data() + (std::size_t(bb) * co + c) * hw, hw,
                            dy.data() + std::size_t(c) * cols + std::size_t(bb) * hw);
        if (bi.requires_grad && !bi.value.empty()) {
            auto& g = bi.ensure_grad();
            for (int c = 0; c < co; ++c) g[c] += dy.row(c).sum();
        }
        if (!wi.requires_grad && !xi.requires_grad) return;
        Buffer col2;
        if (k == 1) {
            col2.resize(std::size_t(ci) * cols);
            for (int bb = 0; bb < n; ++bb)
                for (int c = 0; c < ci; ++c)
                    std::copy_n(xi.value.data() + (std::size_t(bb) * ci + c) * hw, hw,
                                col2.data() + std::size_t(c) * cols + std::size_t(bb) * hw);
        } else if (wi.requires_grad) {
            im2col(xi.value.data(), n, ci, h, wd, k, col2);
        }
        if (wi.requires_grad) {
            MapMat gw(wi.ensure_grad().data(), co, kk);
            gw.noalias() += dy * CMapMat(col2.data(), kk, Eigen::Index(cols)).transpose();
        }
        if (xi.requires_grad) {
            RowMat dcol(kk, cols);
            dcol.noalias() = CMapMat(wi.value.data(), co, kk).transpose() * dy;
            auto& gx = xi.ensure_grad();
            if (k == 1) {
                for (int bb = 0; bb < n; ++bb)
                    for (int c = 0; c < ci; ++c) {
                        float* d = gx.data() + (std::size_t(bb) * ci + c) * hw;
                        const float* s = dcol.data() + std::size_t(c) * cols + std::size_t(bb) * hw;
                        for (std::size_t i = 0; i < hw; ++i) d[i] += s[i];
                    }
            } else {
                col2im(dcol.data(), n, ci, h, wd, k, gx.data());
            }
        }
    });
}

Var avg_pool2(const Var& x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ContractViolation("avg_pool2: needs even spatial dims");
    const int nc = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
    Buffer out(std::size_t(nc) * ho * wo);
    for (int c = 0; c < nc; ++c) {
        const float* src = x.value().data() + std::size_t(c) * h * w;
        float* dst = out.data() + std::size_t(c) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
                dst[y * wo + xx] = 0.25f * (src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1] +
                                            src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
    }
    return make_result({s[0], s[1], ho, wo}, std::move(out), {x}, [=](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int c = 0; c < nc; ++c) {
            float* dst = g.data() + std::size_t(c) * h * w;
            const float* src = self.grad.data() + std::size_t(c) * ho * wo;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) dst[y * w + xx] += 0.25f * src[(y / 2) * wo + xx / 2];
        }
    });
}

Var upsample2(const Var& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ContractViolation("upsample2: expected NCHW");
    const int nc = s[0] * s[1], h = s[2], w = s[3], ho = 2 * h, wo = 2 * w;
    Buffer out(std::size_t(nc) * ho * wo);
    for (int c = 0; c < nc; ++c) {
        const float* src = x.value().data() + std::size_t(c) * h * w;
        float* dst = out.data() + std::size_t(c) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
    }
    return make_result({s[0], s[1], ho, wo}, std::move(out), {x}, [=](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int c = 0; c < nc; ++c) {
            float* dst = g.data() + std::size_t(c) * h * w;
            const float* src = self.grad.data() + std::size_t(c) * ho * wo;
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
    const auto& s = x.shape();
    if (s.size() < 2 || s[1] % groups) throw ContractViolation("group_norm: channels not divisible by groups");
    if (gamma.size() != std::size_t(s[1]) || beta.size() != std::size_t(s[1]))
        throw ContractViolation("group_norm: affine size mismatch");
    const int n = s[0], c = s[1], cpg = c / groups;
    const std::size_t inner = trailing(s, 2);
    const std::size_t gsize = std::size_t(cpg) * inner;
    Buffer xhat(x.size()), out(x.size());
    Buffer inv_std(std::size_t(n) * groups);
    for (int b = 0; b < n; ++b)
        for (int g = 0; g < groups; ++g) {
            const std::size_t off = (std::size_t(b) * c + std::size_t(g) * cpg) * inner;
            const float* src = x.value().data() + off;
            double m = 0.0, v = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) m += src[i];
            m /= double(gsize);
            for (std::size_t i = 0; i < gsize; ++i) v += (src[i] - m) * (src[i] - m);
            v /= double(gsize);
            const float is = float(1.0 / std::sqrt(v + eps));
            const float mf = float(m);
            inv_std[std::size_t(b) * groups + g] = is;
            for (int cc = 0; cc < cpg; ++cc) {
                const int ch = g * cpg + cc;
                const float ga = gamma.value()[ch], be = beta.value()[ch];
                const std::size_t o = off + std::size_t(cc) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    const float xh = (x.value()[o + i] - mf) * is;
                    xhat[o + i] = xh;
                    out[o + i] = xh * ga + be;
                }
            }
        }
    return make_result(s, std::move(out), {x, gamma, beta},
                       [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           auto& xi = *self.inputs[0];
                           auto& gi = *self.inputs[1];
                           auto& bi = *self.inputs[2];
                           const auto& dy = self.grad;
                           if (gi.requires_grad || bi.requires_grad) {
                               auto& gg = gi.ensure_grad();
                               auto& gb = bi.ensure_grad();
                               for (int b = 0; b < n; ++b)
                                   for (int ch = 0; ch < c; ++ch) {
                                       const std::size_t off = (std::size_t(b) * c + ch) * inner;
                                       float sg = 0.0f, sb = 0.0f;
                                       for (std::size_t i = 0; i < inner; ++i) {
                                           sg += dy[off + i] * xhat[off + i];
                                           sb += dy[off + i];
                                       }
                                       gg[ch] += sg;
                                       gb[ch] += sb;
                                   }
                           }
                           if (!xi.requires_grad) return;
                           auto& gx = xi.ensure_grad();
                           for (int b = 0; b < n; ++b)
                               for (int g = 0; g < groups; ++g) {
                                   const std::size_t off = (std::size_t(b) * c + std::size_t(g) * cpg) * inner;
                                   float mean_d = 0.0f, mean_dx = 0.0f;
                                   for (int cc = 0; cc < cpg; ++cc) {
                                       const float ga = gi.value[g * cpg + cc];
                                       const std::size_t o = off + std::size_t(cc) * inner;
                                       float sd = 0.0f, sdx = 0.0f;
                                       for (std::size_t i = 0; i < inner; ++i) {
                                           const float d = dy[o + i] * ga;
                                           sd += d;
                                           sdx += d * xhat[o + i];
                                       }
                                       mean_d += sd;
                                       mean_dx += sdx;
                                   }
                                   mean_d /= float(gsize);
                                   mean_dx /= float(gsize);
                                   const float is = inv_std[std::size_t(b) * groups + g];
                                   for (int cc = 0; cc < cpg; ++cc) {
                                       const float ga = gi.value[g * cpg + cc];
                                       const std::size_t o = off + std::size_t(cc) * inner;
                                       for (std::size_t i = 0; i < inner; ++i)
                                           gx[o + i] += is * (dy[o + i] * ga - mean_d - xhat[o + i] * mean_dx);
                                   }
                               }
                       });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& ws = w.shape();
    if (ws.size() != 2 || x.shape().empty() || x.shape().back() != ws[0])
        throw ContractViolation("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(ws));
    const int kin = ws[0], kout = ws[1];
    const int m = int(x.size() / std::size_t(kin));
    RowMat y(m, kout);
    y.noalias() = CMapMat(x.value().data(), m, kin) * CMapMat(w.value().data(), kin, kout);
    if (b) {
        if (b.size() != std::size_t(kout)) throw ContractViolation("linear: bias size mismatch");
        y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.value().data(), kout);
    }
    std::vector<int> shape = x.shape();
    shape.back() = kout;
    Buffer out(y.data(), y.data() + y.size());
    return make_result(std::move(shape), std::move(out), {x, w, b ? b : Var::constant({0}, {})}, [=](Node& self) {
        auto& xi = *self.inputs[0];
        auto& wi = *self.inputs[1];
        auto& bi = *self.inputs[2];
        CMapMat dy(self.grad.data(), m, kout);
        if (xi.requires_grad) {
            MapMat gx(xi.ensure_grad().data(), m, kin);
            gx.noalias() += dy * CMapMat(wi.value.data(), kin, kout).transpose();
        }
        if (wi.requires_grad) {
            MapMat gw(wi.ensure_grad().data(), kin, kout);
            gw.noalias() += CMapMat(xi.value.data(), m, kin).transpose() * dy;
        }
        if (bi.requires_grad && !bi.value.empty()) {
            Eigen::Map<Eigen::RowVectorXf> gb(bi.ensure_grad().data(), kout);
            gb += dy.colwise().sum();
        }
    });
}

// ---------------------------------------------------------------- attention

Var to_tokens(const Var& x, int views) {
    const auto& s = x.shape();
    if (s.size() != 4 || views <= 0 || s[0] % views)
        throw ContractViolation("to_tokens: batch " + shape_string(s) + " not divisible into views");
    const int bv = s[0], c = s[1], hw = s[2] * s[3], b = bv / views, l = views * hw;
    Buffer out(x.size());
    // token index = v*hw + p for batch b; source (b*views+v, ch, p)
    for (int i = 0; i < bv; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p) {
                const int bb = i / views, v = i % views;
                out[(std::size_t(bb) * l + std::size_t(v) * hw + p) * c + ch] = x.value()[(std::size_t(i) * c + ch) * hw + p];
            }
    return make_result({b, l, c}, std::move(out), {x}, [=](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int i = 0; i < bv; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p) {
                    const int bb = i / views, v = i % views;
                    g[(std::size_t(i) * c + ch) * hw + p] += self.grad[(std::size_t(bb) * l + std::size_t(v) * hw + p) * c + ch];
                }
    });
}

Var from_tokens(const Var& t, int views, int channels, int height, int width) {
    const auto& s = t.shape();
    const int hw = height * width;
    if (s.size() != 3 || s[2] != channels || s[1] != views * hw)
        throw ContractViolation("from_tokens: token shape " + shape_string(s) + " mismatch");
    const int b = s[0], bv = b * views, l = s[1], c = channels;
    Buffer out(t.size());
    for (int i = 0; i < bv; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p) {
                const int bb = i / views, v = i % views;
                out[(std::size_t(i) * c + ch) * hw + p] = t.value()[(std::size_t(bb) * l + std::size_t(v) * hw + p) * c + ch];
            }
    return make_result({bv, c, height, width}, std::move(out), {t}, [=](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int i = 0; i < bv; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p) {
                    const int bb = i / views, v = i % views;
                    g[(std::size_t(bb) * l + std::size_t(v) * hw + p) * c + ch] += self.grad[(std::size_t(i) * c + ch) * hw + p];
                }
    });
}

Var attention(const Var& q, const Var& k, const Var& v) {
    check_same(q, k, "attention");
    check_same(q, v, "attention");
    if (q.shape().size() != 3) throw ContractViolation("attention: expected [B, L, C]");
    const int b = q.dim(0), l = q.dim(1), c = q.dim(2);
    const float sc = 1.0f / std::sqrt(float(c));
    const std::size_t blk = std::size_t(l) * c;
    Buffer probs(std::size_t(b) * l * l), out(q.size());
    for (int i = 0; i < b; ++i) {
        CMapMat qm(q.value().data() + i * blk, l, c), km(k.value().data() + i * blk, l, c),
            vm(v.value().data() + i * blk, l, c);
        MapMat p(probs.data() + std::size_t(i) * l * l, l, l);
        p.noalias() = (qm * km.transpose()) * sc;
        for (int r = 0; r < l; ++r) {
            const float mx = p.row(r).maxCoeff();
            p.row(r) = (p.row(r).array() - mx).exp();
            p.row(r) /= p.row(r).sum();
        }
        MapMat(out.data() + i * blk, l, c).noalias() = p * vm;
    }
    return make_result(q.shape(), std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node& self) {
        auto& qi = *self.inputs[0];
        auto& ki = *self.inputs[1];
        auto& vi = *self.inputs[2];
        for (int i = 0; i < b; ++i) {
            CMapMat p(probs.data() + std::size_t(i) * l * l, l, l);
            CMapMat dout(self.grad.data() + i * blk, l, c);
            CMapMat qm(qi.value.data() + i * blk, l, c), km(ki.value.data() + i * blk, l, c),
                vm(vi.value.data() + i * blk, l, c);
            if (vi.requires_grad) MapMat(vi.ensure_grad().data() + i * blk, l, c).noalias() += p.transpose() * dout;
            if (!qi.requires_grad && !ki.requires_grad) continue;
            RowMat dp = dout * vm.transpose();
            RowMat ds(l, l);
            for (int r = 0; r < l; ++r) {
                const float dot = dp.row(r).dot(p.row(r));
                ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
            }
            ds *= sc;
            if (qi.requires_grad) MapMat(qi.ensure_grad().data() + i * blk, l, c).noalias() += ds * km;
            if (ki.requires_grad) MapMat(ki.ensure_grad().data() + i * blk, l, c).noalias() += ds.transpose() * qm;
        }
    });
}

Var row_norm(const Var& x, float eps) {
    if (x.shape().size() != 2) throw ContractViolation("row_norm: expected [P, D]");
    const int p = x.dim(0), d = x.dim(1);
    Buffer out(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += double(x.value()[std::size_t(i) * d + j]) * x.value()[std::size_t(i) * d + j];
        out[std::size_t(i)] = float(std::sqrt(s + eps));
    }
    return make_result({p}, std::move(out), {x}, [=](Node& self) {
        auto& xi = *self.inputs[0];
        auto& g = xi.ensure_grad();
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < d; ++j)
                g[std::size_t(i) * d + j] += self.grad[std::size_t(i)] * xi.value[std::size_t(i) * d + j] / self.value[std::size_t(i)];
    });
}

// ---------------------------------------------------------------- reductions / losses

Var sum(const Var& a) {
    double s = 0.0;
    for (float v : a.value()) s += v;
    return make_result({1}, {float(s)}, {a}, [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0f / float(a.size())); }

Var mse(const Var& a, const std::vector<float>& target) {
    if (target.size() != a.size()) throw ContractViolation("mse: target size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.value()[i]) - target[i];
        s += d * d;
    }
    const float inv = 1.0f / float(a.size());
    return make_result({1}, {float(s * inv)}, {a}, [target, inv](Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.ensure_grad();
        const float k = 2.0f * inv * self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (in.value[i] - target[i]);
    });
}

Var mse_rows(const Var& a, const std::vector<float>& target) {
    if (target.size() != a.size()) throw ContractViolation("mse_rows: target size mismatch");
    const int rows = a.dim(0);
    const std::size_t inner = a.size() / std::size_t(rows);
    Buffer out(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
            const double d = double(a.value()[r * inner + i]) - target[r * inner + i];
            s += d * d;
        }
        out[std::size_t(r)] = float(s / double(inner));
    }
    return make_result({rows}, std::move(out), {a}, [target, inner, rows](Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const float k = 2.0f / float(inner) * self.grad[std::size_t(r)];
            for (std::size_t i = 0; i < inner; ++i) g[r * inner + i] += k * (in.value[r * inner + i] - target[r * inner + i]);
        }
    });
}

Var bce(const Var& p, const std::vector<float>& target) {
    if (target.size() != p.size()) throw ContractViolation("bce: target size mismatch");
    constexpr float lo = 1e-6f, hi = 1.0f - 1e-6f;
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const float q = std::clamp(p.value()[i], lo, hi);
        s -= target[i] * std::log(q) + (1.0f - target[i]) * std::log(1.0f - q);
    }
    const float inv = 1.0f / float(p.size());
    return make_result({1}, {float(s * inv)}, {p}, [target, inv](Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float raw = in.value[i];
            if (raw < lo || raw > hi) continue;
            g[i] += self.grad[0] * inv * (raw - target[i]) / (raw * (1.0f - raw));
        }
    });
}

Var sdf_opacity(const Var& sdf, const Var& s) {
    if (sdf.shape().size() != 2 || s.size() != 1) throw ContractViolation("sdf_opacity: expected [R, K] and [1]");
    const int rays = sdf.dim(0), k = sdf.dim(1);
    constexpr float eps = 1e-5f;
    const float sharp = s.value()[0];
    Buffer out(static_cast<std::size_t>(rays));
    for (int r = 0; r < rays; ++r) {
        const float* f = sdf.value().data() + std::size_t(r) * k;
        double trans = 1.0;
        for (int i = 0; i + 1 < k; ++i) {
            const float p0 = 1.0f / (1.0f + std::exp(-sharp * f[i]));
            const float p1 = 1.0f / (1.0f + std::exp(-sharp * f[i + 1]));
            const float a = std::clamp((p0 - p1 + eps) / (p0 + eps), 0.0f, 1.0f);
            trans *= (1.0 - a);
        }
        out[std::size_t(r)] = float(1.0 - trans);
    }
    return make_result({rays}, std::move(out), {sdf, s}, [=](Node& self) {
        auto& fi = *self.inputs[0];
        auto& si = *self.inputs[1];
        Buffer phi(static_cast<std::size_t>(k)), alpha(static_cast<std::size_t>(k - 1));
        std::vector<double> prefix(static_cast<std::size_t>(k)), suffix(static_cast<std::size_t>(k));
        Buffer dphi(static_cast<std::size_t>(k));
        double ds_acc = 0.0;
        Buffer* gf = fi.requires_grad ? &fi.ensure_grad() : nullptr;
        for (int r = 0; r < rays; ++r) {
            const float go = self.grad[std::size_t(r)];
            if (go == 0.0f) continue;
            const float* f = fi.value.data() + std::size_t(r) * k;
            for (int i = 0; i < k; ++i) phi[i] = 1.0f / (1.0f + std::exp(-sharp * f[i]));
            for (int i = 0; i + 1 < k; ++i) alpha[i] = (phi[i] - phi[i + 1] + eps) / (phi[i] + eps);
            // prefix[i] = prod_{j<i}(1-a_j), suffix[i] = prod_{j>i}(1-a_j), clamped alphas
            prefix[0] = 1.0;
            for (int i = 1; i < k - 1; ++i) prefix[i] = prefix[i - 1] * (1.0 - std::clamp(alpha[i - 1], 0.0f, 1.0f));
            suffix[k - 2] = 1.0;
            for (int i = k - 3; i >= 0; --i) suffix[i] = suffix[i + 1] * (1.0 - std::clamp(alpha[i + 1], 0.0f, 1.0f));
            std::fill(dphi.begin(), dphi.end(), 0.0f);
            for (int i = 0; i + 1 < k; ++i) {
                if (alpha[i] <= 0.0f || alpha[i] >= 1.0f) continue;
                const float d_alpha = float(go * prefix[i] * suffix[i]);  // dO/da_i
                const float denom = phi[i] + eps;
                dphi[i] += d_alpha * phi[i + 1] / (denom * denom);
                dphi[i + 1] -= d_alpha / denom;
            }
            for (int i = 0; i < k; ++i) {
                const float dsig = phi[i] * (1.0f - phi[i]) * dphi[i];
                if (gf) (*gf)[std::size_t(r) * k + i] += dsig * sharp;
                ds_acc += double(dsig) * f[i];
            }
        }
        if (si.requires_grad) si.ensure_grad()[0] += float(ds_acc);
    });
}

// ---------------------------------------------------------------- parameters / optimizer

Var& ParameterStore::create(const std::string& name, std::vector<int> shape, std::vector<float> values) {
    if (std::find(names_.begin(), names_.end(), name) != names_.end())
        throw ContractViolation("duplicate parameter name " + name);
    params_.push_back(Var::parameter(std::move(shape), std::move(values)));
    names_.push_back(name);
    return params_.back();
}

std::size_t ParameterStore::count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

Var* ParameterStore::find(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return &params_[i];
    return nullptr;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

std::size_t ParameterStore::copy_from(const ParameterStore& other) {
    std::size_t copied = 0;
    for (std::size_t i = 0; i < other.names_.size(); ++i) {
        Var* mine = find(other.names_[i]);
        if (mine && mine->shape() == other.params_[i].shape()) {
            mine->mutable_value() = other.params_[i].value();
            ++copied;
        }
    }
    return copied;
}

std::vector<float> init_uniform(std::size_t n, int fan_in, Rng& rng, float gain) {
    const float bound = gain * std::sqrt(3.0f / float(std::max(1, fan_in)));
    std::vector<float> v(n);
    for (auto& x : v) x = float((2.0 * rng.uniform() - 1.0) * bound);
    return v;
}

Adam::Adam(std::vector<Var> params, Options options) : params_(std::move(params)), opt_(options) {
    for (const auto& p : params_) {
        m_.emplace_back(p.size(), 0.0f);
        v_.emplace_back(p.size(), 0.0f);
    }
}

float Adam::step() {
    ++t_;
    double sq = 0.0;
    for (auto& p : params_) {
        auto& g = p.mutable_grad();
        for (float x : g) sq += double(x) * x;
    }
    const float norm = float(std::sqrt(sq));
    if (!std::isfinite(norm)) throw OptimizationFailure("non-finite gradient norm");
    const float clip = (opt_.clip_norm > 0.0f && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0f;
    const float bc1 = 1.0f - std::pow(opt_.beta1, float(t_));
    const float bc2 = 1.0f - std::pow(opt_.beta2, float(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& w = params_[k].mutable_value();
        auto& g = params_[k].mutable_grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const float gi = g[i] * clip;
            m[i] = opt_.beta1 * m[i] + (1.0f - opt_.beta1) * gi;
            v[i] = opt_.beta2 * v[i] + (1.0f - opt_.beta2) * gi * gi;
            w[i] -= opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        }
        std::fill(g.begin(), g.end(), 0.0f);
    }
    return norm;
}

Ema::Ema(std::vector<Var> params, float decay) : params_(std::move(params)), decay_(decay) {
    for (const auto& p : params_) shadow_.emplace_back(p.value().begin(), p.value().end());
}

void Ema::update() {
    ++updates_;
    // Warm-up keeps early averages from being dominated by the initialisation.
    const float d = std::min(decay_, float(1 + updates_) / float(10 + updates_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto& w = params_[k].value();
        auto& s = shadow_[k];
        for (std::size_t i = 0; i < w.size(); ++i) s[i] = d * s[i] + (1.0f - d) * w[i];
    }
}

void Ema::copy_to_params() const {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Var p = params_[k];
        p.mutable_value().assign(shadow_[k].begin(), shadow_[k].end());
    }
}

}  // namespace cellsynth::nn
