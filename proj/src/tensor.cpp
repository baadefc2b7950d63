// SPDX-License-Identifier: Apache-2.0
#include "genrep/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

#include "genrep/kernels.hpp"

namespace genrep {

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int e : shape) {
        if (e <= 0) {
            throw DimError("tensor extents must be positive");
        }
        n *= static_cast<size_t>(e);
    }
    return n;
}

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) {
        throw ContractError(std::string(who) + ": undefined tensor");
    }
}

void check_finite_node(const Node& n, const char* who) {
    if (!check_finite_enabled()) {
        return;
    }
    for (float v : n.data) {
        if (!std::isfinite(v)) {
            throw ContractError(std::string(who) + ": non-finite value produced");
        }
    }
}

std::shared_ptr<Node> make_result(std::vector<int> shape,
                                  std::initializer_list<Tensor> inputs) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.resize(shape_numel(n->shape));
    bool rg = false;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs) {
            rg = rg || t.node->requires_grad;
        }
    }
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            n->parents.push_back(t.node);
        }
    }
    return n;
}

void set_backward(const std::shared_ptr<Node>& n, std::function<void(Node&)> fn) {
    if (n->requires_grad) {
        n->backward_fn = std::move(fn);
    }
}

void accum_same(Node& p, const std::vector<float>& g, float sign = 1.0f) {
    if (!p.requires_grad) {
        return;
    }
    p.ensure_grad();
    float* dst = p.grad.data();
    const size_t n = g.size();
    for (size_t i = 0; i < n; ++i) {
        dst[i] += sign * g[i];
    }
}

int last_dim(const Tensor& t) { return t.shape().back(); }

// rank-3 view of a rank-2/3 tensor as [B, L, D]
struct Bld {
    int b, l, d;
};
Bld as_bld(const Tensor& t, const char* who) {
    if (t.rank() == 2) {
        return {1, t.dim(0), t.dim(1)};
    }
    if (t.rank() == 3) {
        return {t.dim(0), t.dim(1), t.dim(2)};
    }
    throw DimError(std::string(who) + ": expected rank-2 or rank-3 tensor");
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), 0.0f);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    if (shape_numel(n->shape) != data.size()) {
        throw DimError("from_data: shape does not match data length");
    }
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(float v) { return from_data({1}, {v}); }

float Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item: tensor is not scalar");
    }
    return node->data[0];
}

void Tensor::backward() const {
    check_defined(*this, "backward");
    if (numel() != 1) {
        throw ContractError("backward: loss must be scalar");
    }
    if (!node->requires_grad) {
        return;
    }
    // iterative post-order over the requires_grad subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({node.get(), 0});
    visited.insert(node.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    // Non-leaf grads are scratch for this pass; leaf grads accumulate
    // across repeated calls.
    for (Node* n : order) {
        if (n->backward_fn) {
            n->grad.assign(n->data.size(), 0.0f);
        }
    }
    node->ensure_grad();
    node->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

static void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    check_defined(a, who);
    check_defined(b, who);
    if (a.shape() != b.shape()) {
        throw DimError(std::string(who) + ": shape mismatch");
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = make_result(a.shape(), {a, b});
    const size_t n = out->numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        py[i] = pa[i] + pb[i];
    }
    check_finite_node(*out, "add");
    set_backward(out, [pa_n = a.node, pb_n = b.node](Node& self) {
        accum_same(*pa_n, self.grad);
        accum_same(*pb_n, self.grad);
    });
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = make_result(a.shape(), {a, b});
    const size_t n = out->numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        py[i] = pa[i] - pb[i];
    }
    check_finite_node(*out, "sub");
    set_backward(out, [pa_n = a.node, pb_n = b.node](Node& self) {
        accum_same(*pa_n, self.grad);
        accum_same(*pb_n, self.grad, -1.0f);
    });
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = make_result(a.shape(), {a, b});
    const size_t n = out->numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        py[i] = pa[i] * pb[i];
    }
    check_finite_node(*out, "mul");
    set_backward(out, [an = a.node, bn = b.node](Node& self) {
        const size_t n = self.numel();
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                an->grad[i] += self.grad[i] * bn->data[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                bn->grad[i] += self.grad[i] * an->data[i];
            }
        }
    });
    return Tensor(out);
}

Tensor scale(const Tensor& a, float s) {
    check_defined(a, "scale");
    auto out = make_result(a.shape(), {a});
    const size_t n = out->numel();
    const float* pa = a.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        py[i] = pa[i] * s;
    }
    check_finite_node(*out, "scale");
    set_backward(out, [an = a.node, s](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        const size_t n = self.numel();
        for (size_t i = 0; i < n; ++i) {
            an->grad[i] += self.grad[i] * s;
        }
    });
    return Tensor(out);
}

Tensor add_scalar(const Tensor& a, float s) {
    check_defined(a, "add_scalar");
    auto out = make_result(a.shape(), {a});
    const size_t n = out->numel();
    const float* pa = a.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        py[i] = pa[i] + s;
    }
    check_finite_node(*out, "add_scalar");
    set_backward(out, [an = a.node](Node& self) { accum_same(*an, self.grad); });
    return Tensor(out);
}

Tensor silu(const Tensor& a) {
    check_defined(a, "silu");
    auto out = make_result(a.shape(), {a});
    const size_t n = out->numel();
    const float* pa = a.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        const float sg = 1.0f / (1.0f + std::exp(-pa[i]));
        py[i] = pa[i] * sg;
    }
    check_finite_node(*out, "silu");
    set_backward(out, [an = a.node](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        const size_t n = self.numel();
        for (size_t i = 0; i < n; ++i) {
            const float x = an->data[i];
            const float sg = 1.0f / (1.0f + std::exp(-x));
            an->grad[i] += self.grad[i] * sg * (1.0f + x * (1.0f - sg));
        }
    });
    return Tensor(out);
}

Tensor gelu(const Tensor& a) {
    check_defined(a, "gelu");
    constexpr float kInvSqrt2 = 0.7071067811865475244f;
    constexpr float kInvSqrt2Pi = 0.3989422804014326779f;
    auto out = make_result(a.shape(), {a});
    const size_t n = out->numel();
    const float* pa = a.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        py[i] = 0.5f * pa[i] * (1.0f + std::erf(pa[i] * kInvSqrt2));
    }
    check_finite_node(*out, "gelu");
    set_backward(out, [an = a.node](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        const size_t n = self.numel();
        for (size_t i = 0; i < n; ++i) {
            const float x = an->data[i];
            const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
            an->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
    return Tensor(out);
}

Tensor dropout(const Tensor& a, float p, Rng& rng, bool train) {
    check_defined(a, "dropout");
    if (p < 0.0f || p >= 1.0f) {
        throw ConfigError("dropout: p must be in [0,1)");
    }
    if (!train || p == 0.0f) {
        return a;
    }
    auto out = make_result(a.shape(), {a});
    const size_t n = out->numel();
    const float keep_scale = 1.0f / (1.0f - p);
    std::vector<float> mask(n);
    const float* pa = a.data();
    float* py = out->data.data();
    for (size_t i = 0; i < n; ++i) {
        mask[i] = (rng.uniform() < p) ? 0.0f : keep_scale;
        py[i] = pa[i] * mask[i];
    }
    set_backward(out, [an = a.node, mask = std::move(mask)](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        const size_t n = self.numel();
        for (size_t i = 0; i < n; ++i) {
            an->grad[i] += self.grad[i] * mask[i];
        }
    });
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Shape / indexing

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    check_defined(a, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw DimError("reshape: element count mismatch");
    }
    auto out = make_result(std::move(shape), {a});
    out->data = a.vec();
    set_backward(out, [an = a.node](Node& self) { accum_same(*an, self.grad); });
    return Tensor(out);
}

Tensor concat_axis1(const Tensor& a, const Tensor& b) {
    check_defined(a, "concat_axis1");
    check_defined(b, "concat_axis1");
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
        throw DimError("concat_axis1: need [B,La,D] and [B,Lb,D]");
    }
    const int B = a.dim(0), La = a.dim(1), Lb = b.dim(1), D = a.dim(2);
    auto out = make_result({B, La + Lb, D}, {a, b});
    const float* pa = a.data();
    const float* pb = b.data();
    float* py = out->data.data();
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(py + static_cast<size_t>(bi) * (La + Lb) * D,
                    pa + static_cast<size_t>(bi) * La * D, sizeof(float) * La * D);
        std::memcpy(py + static_cast<size_t>(bi) * (La + Lb) * D + static_cast<size_t>(La) * D,
                    pb + static_cast<size_t>(bi) * Lb * D, sizeof(float) * Lb * D);
    }
    set_backward(out, [an = a.node, bn = b.node, B, La, Lb, D](Node& self) {
        for (int bi = 0; bi < B; ++bi) {
            const float* g = self.grad.data() + static_cast<size_t>(bi) * (La + Lb) * D;
            if (an->requires_grad) {
                an->ensure_grad();
                float* da = an->grad.data() + static_cast<size_t>(bi) * La * D;
                for (int i = 0; i < La * D; ++i) {
                    da[i] += g[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                float* db = bn->grad.data() + static_cast<size_t>(bi) * Lb * D;
                const float* gb = g + static_cast<size_t>(La) * D;
                for (int i = 0; i < Lb * D; ++i) {
                    db[i] += gb[i];
                }
            }
        }
    });
    return Tensor(out);
}

Tensor slice_axis1(const Tensor& a, int start, int len) {
    check_defined(a, "slice_axis1");
    if (a.rank() != 3) {
        throw DimError("slice_axis1: need rank-3 tensor");
    }
    const int B = a.dim(0), L = a.dim(1), D = a.dim(2);
    if (start < 0 || len <= 0 || start + len > L) {
        throw DimError("slice_axis1: range out of bounds");
    }
    auto out = make_result({B, len, D}, {a});
    const float* pa = a.data();
    float* py = out->data.data();
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(py + static_cast<size_t>(bi) * len * D,
                    pa + (static_cast<size_t>(bi) * L + start) * D, sizeof(float) * len * D);
    }
    set_backward(out, [an = a.node, B, L, D, start, len](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
            float* da = an->grad.data() + (static_cast<size_t>(bi) * L + start) * D;
            const float* g = self.grad.data() + static_cast<size_t>(bi) * len * D;
            for (int i = 0; i < len * D; ++i) {
                da[i] += g[i];
            }
        }
    });
    return Tensor(out);
}

Tensor gather_axis1(const Tensor& x, const std::vector<int>& idx, int M) {
    check_defined(x, "gather_axis1");
    if (x.rank() != 3) {
        throw DimError("gather_axis1: need rank-3 tensor");
    }
    const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
    if (static_cast<int>(idx.size()) != B * M) {
        throw DimError("gather_axis1: index count must be B*M");
    }
    for (int i : idx) {
        if (i < 0 || i >= L) {
            throw ContractError("gather_axis1: index out of range");
        }
    }
    auto out = make_result({B, M, D}, {x});
    const float* px = x.data();
    float* py = out->data.data();
    for (int bi = 0; bi < B; ++bi) {
        for (int mi = 0; mi < M; ++mi) {
            const int src = idx[static_cast<size_t>(bi) * M + mi];
            std::memcpy(py + (static_cast<size_t>(bi) * M + mi) * D,
                        px + (static_cast<size_t>(bi) * L + src) * D, sizeof(float) * D);
        }
    }
    set_backward(out, [xn = x.node, idx, B, L, M, D](Node& self) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
            for (int mi = 0; mi < M; ++mi) {
                const int dst = idx[static_cast<size_t>(bi) * M + mi];
                float* dx = xn->grad.data() + (static_cast<size_t>(bi) * L + dst) * D;
                const float* g = self.grad.data() + (static_cast<size_t>(bi) * M + mi) * D;
                for (int d = 0; d < D; ++d) {
                    dx[d] += g[d];
                }
            }
        }
    });
    return Tensor(out);
}

Tensor tile_token(const Tensor& row, int batch, int count) {
    check_defined(row, "tile_token");
    if (row.rank() != 1) {
        throw DimError("tile_token: need rank-1 tensor");
    }
    const int D = row.dim(0);
    const int copies = batch * count;
    auto out = make_result({batch, count, D}, {row});
    const float* pr = row.data();
    float* py = out->data.data();
    for (int bi = 0; bi < copies; ++bi) {
        std::memcpy(py + static_cast<size_t>(bi) * D, pr, sizeof(float) * D);
    }
    set_backward(out, [rn = row.node, copies, D](Node& self) {
        if (!rn->requires_grad) {
            return;
        }
        rn->ensure_grad();
        for (int bi = 0; bi < copies; ++bi) {
            const float* g = self.grad.data() + static_cast<size_t>(bi) * D;
            for (int d = 0; d < D; ++d) {
                rn->grad[d] += g[d];
            }
        }
    });
    return Tensor(out);
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& idx, int B, int M) {
    check_defined(table, "embed_rows");
    if (table.rank() != 2) {
        throw DimError("embed_rows: table must be [L,D]");
    }
    const int L = table.dim(0), D = table.dim(1);
    if (static_cast<int>(idx.size()) != B * M) {
        throw DimError("embed_rows: index count must be B*M");
    }
    for (int i : idx) {
        if (i < 0 || i >= L) {
            throw ContractError("embed_rows: index out of range");
        }
    }
    auto out = make_result({B, M, D}, {table});
    const float* pt = table.data();
    float* py = out->data.data();
    for (int i = 0; i < B * M; ++i) {
        std::memcpy(py + static_cast<size_t>(i) * D,
                    pt + static_cast<size_t>(idx[static_cast<size_t>(i)]) * D,
                    sizeof(float) * D);
    }
    set_backward(out, [tn = table.node, idx, B, M, D](Node& self) {
        if (!tn->requires_grad) {
            return;
        }
        tn->ensure_grad();
        for (int i = 0; i < B * M; ++i) {
            float* dst = tn->grad.data() + static_cast<size_t>(idx[static_cast<size_t>(i)]) * D;
            const float* g = self.grad.data() + static_cast<size_t>(i) * D;
            for (int d = 0; d < D; ++d) {
                dst[d] += g[d];
            }
        }
    });
    return Tensor(out);
}

Tensor add_posemb(const Tensor& x, const Tensor& pos) {
    check_defined(x, "add_posemb");
    check_defined(pos, "add_posemb");
    if (x.rank() != 3 || pos.rank() != 2 || x.dim(1) != pos.dim(0) || x.dim(2) != pos.dim(1)) {
        throw DimError("add_posemb: need x[B,L,D] and pos[L,D]");
    }
    const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
    auto out = make_result(x.shape(), {x, pos});
    const float* px = x.data();
    const float* pp = pos.data();
    float* py = out->data.data();
    const size_t plane = static_cast<size_t>(L) * D;
    for (int bi = 0; bi < B; ++bi) {
        const float* xb = px + bi * plane;
        float* yb = py + bi * plane;
        for (size_t i = 0; i < plane; ++i) {
            yb[i] = xb[i] + pp[i];
        }
    }
    check_finite_node(*out, "add_posemb");
    set_backward(out, [xn = x.node, pn = pos.node, B, L, D](Node& self) {
        const size_t plane = static_cast<size_t>(L) * D;
        if (xn->requires_grad) {
            accum_same(*xn, self.grad);
        }
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                const float* g = self.grad.data() + bi * plane;
                for (size_t i = 0; i < plane; ++i) {
                    pn->grad[i] += g[i];
                }
            }
        }
    });
    return Tensor(out);
}

Tensor mean_axis1(const Tensor& x) {
    check_defined(x, "mean_axis1");
    if (x.rank() != 3) {
        throw DimError("mean_axis1: need rank-3 tensor");
    }
    const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
    auto out = make_result({B, D}, {x});
    const float inv = 1.0f / static_cast<float>(L);
    const float* px = x.data();
    float* py = out->data.data();
    for (int bi = 0; bi < B; ++bi) {
        float* yb = py + static_cast<size_t>(bi) * D;
        std::fill(yb, yb + D, 0.0f);
        for (int li = 0; li < L; ++li) {
            const float* xr = px + (static_cast<size_t>(bi) * L + li) * D;
            for (int d = 0; d < D; ++d) {
                yb[d] += xr[d];
            }
        }
        for (int d = 0; d < D; ++d) {
            yb[d] *= inv;
        }
    }
    set_backward(out, [xn = x.node, B, L, D, inv](Node& self) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
            const float* g = self.grad.data() + static_cast<size_t>(bi) * D;
            for (int li = 0; li < L; ++li) {
                float* dx = xn->grad.data() + (static_cast<size_t>(bi) * L + li) * D;
                for (int d = 0; d < D; ++d) {
                    dx[d] += g[d] * inv;
                }
            }
        }
    });
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Normalization / modulation

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    check_defined(x, "layer_norm");
    check_defined(gain, "layer_norm");
    check_defined(bias, "layer_norm");
    const int D = last_dim(x);
    if (D < 1) {
        throw DimError("layer_norm: feature dim must be >= 1");
    }
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != D || bias.dim(0) != D) {
        throw DimError("layer_norm: gain/bias must be [D]");
    }
    const int rows = static_cast<int>(x.numel()) / D;
    auto out = make_result(x.shape(), {x, gain, bias});
    std::vector<float> mu(rows), inv_std(rows);
    const float* px = x.data();
    const float* pg = gain.data();
    const float* pb = bias.data();
    float* py = out->data.data();
    kern::par_for(rows, static_cast<long>(rows) * D * 8, [&](int r) {
        const float* xr = px + static_cast<size_t>(r) * D;
        double s = 0.0;
        for (int d = 0; d < D; ++d) {
            s += xr[d];
        }
        const double m = s / D;
        double v = 0.0;
        for (int d = 0; d < D; ++d) {
            const double c = xr[d] - m;
            v += c * c;
        }
        const float istd = static_cast<float>(1.0 / std::sqrt(v / D + eps));
        mu[r] = static_cast<float>(m);
        inv_std[r] = istd;
        float* yr = py + static_cast<size_t>(r) * D;
        for (int d = 0; d < D; ++d) {
            yr[d] = (xr[d] - mu[r]) * istd * pg[d] + pb[d];
        }
    });
    check_finite_node(*out, "layer_norm");
    set_backward(out, [xn = x.node, gn = gain.node, bn = bias.node, rows, D,
                       mu = std::move(mu), inv_std = std::move(inv_std)](Node& self) {
        const float* px = xn->data.data();
        const float* pg = gn->data.data();
        if (gn->requires_grad) {
            gn->ensure_grad();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
        }
        for (int r = 0; r < rows; ++r) {
            const float* xr = px + static_cast<size_t>(r) * D;
            const float* gr = self.grad.data() + static_cast<size_t>(r) * D;
            const float istd = inv_std[r];
            const float m = mu[r];
            if (gn->requires_grad || bn->requires_grad) {
                for (int d = 0; d < D; ++d) {
                    const float xhat = (xr[d] - m) * istd;
                    if (gn->requires_grad) {
                        gn->grad[d] += gr[d] * xhat;
                    }
                    if (bn->requires_grad) {
                        bn->grad[d] += gr[d];
                    }
                }
            }
            if (xn->requires_grad) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int d = 0; d < D; ++d) {
                    const float xhat = (xr[d] - m) * istd;
                    const float dxh = gr[d] * pg[d];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += static_cast<double>(dxh) * xhat;
                }
                const float mean_dxhat = static_cast<float>(sum_dxhat / D);
                const float mean_dx_xh = static_cast<float>(sum_dxhat_xhat / D);
                float* dxr = xn->grad.data() + static_cast<size_t>(r) * D;
                for (int d = 0; d < D; ++d) {
                    const float xhat = (xr[d] - m) * istd;
                    const float dxh = gr[d] * pg[d];
                    dxr[d] += istd * (dxh - mean_dxhat - xhat * mean_dx_xh);
                }
            }
        }
    });
    return Tensor(out);
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_t) {
    check_defined(x, "modulate");
    const Bld s = as_bld(x, "modulate");
    if (shift.rank() != 2 || scale_t.rank() != 2 || shift.dim(0) != s.b || shift.dim(1) != s.d ||
        scale_t.dim(0) != s.b || scale_t.dim(1) != s.d) {
        throw DimError("modulate: shift/scale must be [B,D]");
    }
    auto out = make_result(x.shape(), {x, shift, scale_t});
    const float* px = x.data();
    const float* psh = shift.data();
    const float* psc = scale_t.data();
    float* py = out->data.data();
    for (int bi = 0; bi < s.b; ++bi) {
        const float* shb = psh + static_cast<size_t>(bi) * s.d;
        const float* scb = psc + static_cast<size_t>(bi) * s.d;
        for (int li = 0; li < s.l; ++li) {
            const size_t off = (static_cast<size_t>(bi) * s.l + li) * s.d;
            for (int d = 0; d < s.d; ++d) {
                py[off + d] = px[off + d] * (1.0f + scb[d]) + shb[d];
            }
        }
    }
    check_finite_node(*out, "modulate");
    set_backward(out, [xn = x.node, shn = shift.node, scn = scale_t.node, s](Node& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
        }
        if (shn->requires_grad) {
            shn->ensure_grad();
        }
        if (scn->requires_grad) {
            scn->ensure_grad();
        }
        for (int bi = 0; bi < s.b; ++bi) {
            const float* scb = scn->data.data() + static_cast<size_t>(bi) * s.d;
            for (int li = 0; li < s.l; ++li) {
                const size_t off = (static_cast<size_t>(bi) * s.l + li) * s.d;
                for (int d = 0; d < s.d; ++d) {
                    const float g = self.grad[off + d];
                    if (xn->requires_grad) {
                        xn->grad[off + d] += g * (1.0f + scb[d]);
                    }
                    if (shn->requires_grad) {
                        shn->grad[static_cast<size_t>(bi) * s.d + d] += g;
                    }
                    if (scn->requires_grad) {
                        scn->grad[static_cast<size_t>(bi) * s.d + d] += g * xn->data[off + d];
                    }
                }
            }
        }
    });
    return Tensor(out);
}

Tensor gated_add(const Tensor& base, const Tensor& gate, const Tensor& delta) {
    check_same_shape(base, delta, "gated_add");
    const Bld s = as_bld(base, "gated_add");
    if (gate.rank() != 2 || gate.dim(0) != s.b || gate.dim(1) != s.d) {
        throw DimError("gated_add: gate must be [B,D]");
    }
    auto out = make_result(base.shape(), {base, gate, delta});
    const float* pb = base.data();
    const float* pg = gate.data();
    const float* pd = delta.data();
    float* py = out->data.data();
    for (int bi = 0; bi < s.b; ++bi) {
        const float* gb = pg + static_cast<size_t>(bi) * s.d;
        for (int li = 0; li < s.l; ++li) {
            const size_t off = (static_cast<size_t>(bi) * s.l + li) * s.d;
            for (int d = 0; d < s.d; ++d) {
                py[off + d] = pb[off + d] + gb[d] * pd[off + d];
            }
        }
    }
    check_finite_node(*out, "gated_add");
    set_backward(out, [bn = base.node, gn = gate.node, dn = delta.node, s](Node& self) {
        if (bn->requires_grad) {
            accum_same(*bn, self.grad);
        }
        if (gn->requires_grad) {
            gn->ensure_grad();
        }
        if (dn->requires_grad) {
            dn->ensure_grad();
        }
        if (!gn->requires_grad && !dn->requires_grad) {
            return;
        }
        for (int bi = 0; bi < s.b; ++bi) {
            const float* gb = gn->data.data() + static_cast<size_t>(bi) * s.d;
            for (int li = 0; li < s.l; ++li) {
                const size_t off = (static_cast<size_t>(bi) * s.l + li) * s.d;
                for (int d = 0; d < s.d; ++d) {
                    const float g = self.grad[off + d];
                    if (gn->requires_grad) {
                        gn->grad[static_cast<size_t>(bi) * s.d + d] += g * dn->data[off + d];
                    }
                    if (dn->requires_grad) {
                        dn->grad[off + d] += g * gb[d];
                    }
                }
            }
        }
    });
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul_ex(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimError("matmul: need rank-2 tensors");
    }
    const int m = ta ? a.dim(1) : a.dim(0);
    const int ka = ta ? a.dim(0) : a.dim(1);
    const int kb = tb ? b.dim(1) : b.dim(0);
    const int n = tb ? b.dim(0) : b.dim(1);
    if (ka != kb) {
        throw DimError("matmul: inner extents do not match");
    }
    const int k = ka;
    auto out = make_result({m, n}, {a, b});
    kern::matmul(a.data(), b.data(), out->data.data(), m, k, n, ta, tb, false);
    check_finite_node(*out, "matmul");
    set_backward(out, [an = a.node, bn = b.node, m, k, n, ta, tb](Node& self) {
        const float* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            float* da = an->grad.data();
            if (!ta && !tb) {
                kern::matmul(g, bn->data.data(), da, m, n, k, false, true, true);
            } else if (!ta && tb) {
                kern::matmul(g, bn->data.data(), da, m, n, k, false, false, true);
            } else if (ta && !tb) {
                kern::matmul(bn->data.data(), g, da, k, n, m, false, true, true);
            } else {
                kern::matmul(bn->data.data(), g, da, k, n, m, true, true, true);
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            float* db = bn->grad.data();
            if (!ta && !tb) {
                kern::matmul(an->data.data(), g, db, k, m, n, true, false, true);
            } else if (!ta && tb) {
                kern::matmul(g, an->data.data(), db, n, m, k, true, false, true);
            } else if (ta && !tb) {
                kern::matmul(an->data.data(), g, db, k, m, n, false, false, true);
            } else {
                kern::matmul(g, an->data.data(), db, n, m, k, true, true, true);
            }
        }
    });
    return Tensor(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_ex(a, b, false, false); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b) {
    check_defined(x, "linear");
    check_defined(w, "linear");
    if (w.rank() != 2) {
        throw DimError("linear: weight must be [out,in]");
    }
    const int in = last_dim(x);
    if (w.dim(1) != in) {
        throw DimError("linear: input width mismatch");
    }
    const int out_dim = w.dim(0);
    if (b != nullptr && (b->rank() != 1 || b->dim(0) != out_dim)) {
        throw DimError("linear: bias must be [out]");
    }
    const int rows = static_cast<int>(x.numel()) / in;
    std::vector<int> out_shape = x.shape();
    out_shape.back() = out_dim;
    auto out = b != nullptr ? make_result(std::move(out_shape), {x, w, *b})
                            : make_result(std::move(out_shape), {x, w});
    kern::matmul(x.data(), w.data(), out->data.data(), rows, in, out_dim, false, true, false);
    if (b != nullptr) {
        const float* pb = b->data();
        float* py = out->data.data();
        for (int r = 0; r < rows; ++r) {
            float* yr = py + static_cast<size_t>(r) * out_dim;
            for (int j = 0; j < out_dim; ++j) {
                yr[j] += pb[j];
            }
        }
    }
    check_finite_node(*out, "linear");
    std::shared_ptr<Node> bias_node = b != nullptr ? b->node : nullptr;
    set_backward(out, [xn = x.node, wn = w.node, bias_node, rows, in, out_dim](Node& self) {
        const float* g = self.grad.data();
        if (xn->requires_grad) {
            xn->ensure_grad();
            kern::matmul(g, wn->data.data(), xn->grad.data(), rows, out_dim, in, false, false,
                         true);
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            kern::matmul(g, xn->data.data(), wn->grad.data(), out_dim, rows, in, true, false,
                         true);
        }
        if (bias_node && bias_node->requires_grad) {
            bias_node->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const float* gr = g + static_cast<size_t>(r) * out_dim;
                for (int j = 0; j < out_dim; ++j) {
                    bias_node->grad[j] += gr[j];
                }
            }
        }
    });
    return Tensor(out);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    check_defined(q, "attention");
    check_defined(k, "attention");
    check_defined(v, "attention");
    if (q.rank() != k.rank() || k.rank() != v.rank()) {
        throw DimError("attention: rank mismatch");
    }
    const Bld qs = as_bld(q, "attention");
    const Bld ks = as_bld(k, "attention");
    const Bld vs = as_bld(v, "attention");
    if (qs.b != ks.b || qs.b != vs.b || qs.d != ks.d || qs.d != vs.d || ks.l != vs.l) {
        throw DimError("attention: q/k/v shapes incompatible");
    }
    if (heads < 1 || qs.d % heads != 0) {
        throw ConfigError("attention: feature dim not divisible by heads");
    }
    const int B = qs.b, Lq = qs.l, Lk = ks.l, D = qs.d;
    const int dh = D / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    auto out = make_result(q.shape(), {q, k, v});
    // per-(batch,head) softmax rows, kept for the backward pass
    auto probs = std::make_shared<std::vector<float>>(
        static_cast<size_t>(B) * heads * Lq * Lk);
    const float* pq = q.data();
    const float* pk = k.data();
    const float* pv = v.data();
    float* py = out->data.data();
    const long work_per_bh = static_cast<long>(Lq) * Lk * dh * 4;
    kern::par_for(B * heads, work_per_bh * B * heads, [&](int bh) {
        const int bi = bh / heads;
        const int h = bh % heads;
        float* P = probs->data() + static_cast<size_t>(bh) * Lq * Lk;
        for (int i = 0; i < Lq; ++i) {
            const float* qr = pq + (static_cast<size_t>(bi) * Lq + i) * D + h * dh;
            float* Pr = P + static_cast<size_t>(i) * Lk;
            float mx = -std::numeric_limits<float>::infinity();
            for (int j = 0; j < Lk; ++j) {
                const float* kr = pk + (static_cast<size_t>(bi) * Lk + j) * D + h * dh;
                float s = 0.0f;
                for (int d = 0; d < dh; ++d) {
                    s += qr[d] * kr[d];
                }
                Pr[j] = s * sc;
                mx = std::max(mx, Pr[j]);
            }
            float denom = 0.0f;
            for (int j = 0; j < Lk; ++j) {
                Pr[j] = std::exp(Pr[j] - mx);
                denom += Pr[j];
            }
            const float inv = 1.0f / denom;
            float* yr = py + (static_cast<size_t>(bi) * Lq + i) * D + h * dh;
            std::fill(yr, yr + dh, 0.0f);
            for (int j = 0; j < Lk; ++j) {
                Pr[j] *= inv;
                const float* vr = pv + (static_cast<size_t>(bi) * Lk + j) * D + h * dh;
                const float p = Pr[j];
                for (int d = 0; d < dh; ++d) {
                    yr[d] += p * vr[d];
                }
            }
        }
    });
    check_finite_node(*out, "attention");
    set_backward(out, [qn = q.node, kn = k.node, vn = v.node, probs, B, heads, Lq, Lk, D, dh,
                       sc](Node& self) {
        if (qn->requires_grad) {
            qn->ensure_grad();
        }
        if (kn->requires_grad) {
            kn->ensure_grad();
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
        }
        const float* pq = qn->data.data();
        const float* pk = kn->data.data();
        const float* pv = vn->data.data();
        const long work_per_bh = static_cast<long>(Lq) * Lk * dh * 8;
        kern::par_for(B * heads, work_per_bh * B * heads, [&](int bh) {
            const int bi = bh / heads;
            const int h = bh % heads;
            const float* P = probs->data() + static_cast<size_t>(bh) * Lq * Lk;
            std::vector<float> dP(static_cast<size_t>(Lk));
            for (int i = 0; i < Lq; ++i) {
                const float* go = self.grad.data() + (static_cast<size_t>(bi) * Lq + i) * D + h * dh;
                const float* Pr = P + static_cast<size_t>(i) * Lk;
                // dV and dP
                double row_dot = 0.0;
                for (int j = 0; j < Lk; ++j) {
                    const float* vr = pv + (static_cast<size_t>(bi) * Lk + j) * D + h * dh;
                    float s = 0.0f;
                    for (int d = 0; d < dh; ++d) {
                        s += go[d] * vr[d];
                    }
                    dP[j] = s;
                    row_dot += static_cast<double>(s) * Pr[j];
                    if (vn->requires_grad) {
                        float* dvr = vn->grad.data() + (static_cast<size_t>(bi) * Lk + j) * D + h * dh;
                        const float p = Pr[j];
                        for (int d = 0; d < dh; ++d) {
                            dvr[d] += p * go[d];
                        }
                    }
                }
                if (!qn->requires_grad && !kn->requires_grad) {
                    continue;
                }
                const float* qr = pq + (static_cast<size_t>(bi) * Lq + i) * D + h * dh;
                float* dqr = qn->requires_grad
                                 ? qn->grad.data() + (static_cast<size_t>(bi) * Lq + i) * D + h * dh
                                 : nullptr;
                for (int j = 0; j < Lk; ++j) {
                    const float ds = Pr[j] * (dP[j] - static_cast<float>(row_dot)) * sc;
                    const float* kr = pk + (static_cast<size_t>(bi) * Lk + j) * D + h * dh;
                    if (dqr != nullptr) {
                        for (int d = 0; d < dh; ++d) {
                            dqr[d] += ds * kr[d];
                        }
                    }
                    if (kn->requires_grad) {
                        float* dkr = kn->grad.data() + (static_cast<size_t>(bi) * Lk + j) * D + h * dh;
                        for (int d = 0; d < dh; ++d) {
                            dkr[d] += ds * qr[d];
                        }
                    }
                }
            }
        });
    });
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions / losses

Tensor sum_all(const Tensor& a) {
    check_defined(a, "sum_all");
    auto out = make_result({1}, {a});
    double s = 0.0;
    for (float v : a.vec()) {
        s += v;
    }
    out->data[0] = static_cast<float>(s);
    check_finite_node(*out, "sum_all");
    set_backward(out, [an = a.node](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        const float g = self.grad[0];
        for (float& d : an->grad) {
            d += g;
        }
    });
    return Tensor(out);
}

Tensor mean_all(const Tensor& a) {
    check_defined(a, "mean_all");
    auto out = make_result({1}, {a});
    double s = 0.0;
    for (float v : a.vec()) {
        s += v;
    }
    const float inv = 1.0f / static_cast<float>(a.numel());
    out->data[0] = static_cast<float>(s * inv);
    check_finite_node(*out, "mean_all");
    set_backward(out, [an = a.node, inv](Node& self) {
        if (!an->requires_grad) {
            return;
        }
        an->ensure_grad();
        const float g = self.grad[0] * inv;
        for (float& d : an->grad) {
            d += g;
        }
    });
    return Tensor(out);
}

Tensor mean_sq_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mean_sq_diff");
    auto out = make_result({1}, {a, b});
    const size_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pa[i]) - pb[i];
        s += d * d;
    }
    out->data[0] = static_cast<float>(s / static_cast<double>(n));
    check_finite_node(*out, "mean_sq_diff");
    set_backward(out, [an = a.node, bn = b.node, n](Node& self) {
        const float g = self.grad[0] * 2.0f / static_cast<float>(n);
        if (an->requires_grad) {
            an->ensure_grad();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
        }
        for (size_t i = 0; i < n; ++i) {
            const float d = (an->data[i] - bn->data[i]) * g;
            if (an->requires_grad) {
                an->grad[i] += d;
            }
            if (bn->requires_grad) {
                bn->grad[i] -= d;
            }
        }
    });
    return Tensor(out);
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    check_defined(logits, "cross_entropy");
    if (logits.rank() != 2) {
        throw DimError("cross_entropy: logits must be [N,K]");
    }
    const int N = logits.dim(0);
    const int K = logits.dim(1);
    if (static_cast<int>(labels.size()) != N) {
        throw ContractError("cross_entropy: label count mismatch");
    }
    for (int l : labels) {
        if (l < 0 || l >= K) {
            throw ContractError("cross_entropy: label index out of range");
        }
    }
    auto out = make_result({1}, {logits});
    const float* px = logits.data();
    std::vector<float> lse(N);
    double total = 0.0;
    for (int r = 0; r < N; ++r) {
        const float* xr = px + static_cast<size_t>(r) * K;
        float mx = xr[0];
        for (int j = 1; j < K; ++j) {
            mx = std::max(mx, xr[j]);
        }
        double s = 0.0;
        for (int j = 0; j < K; ++j) {
            s += std::exp(static_cast<double>(xr[j]) - mx);
        }
        lse[r] = mx + static_cast<float>(std::log(s));
        total += static_cast<double>(lse[r]) - xr[labels[static_cast<size_t>(r)]];
    }
    out->data[0] = static_cast<float>(total / N);
    check_finite_node(*out, "cross_entropy");
    set_backward(out, [ln = logits.node, labels, lse = std::move(lse), N, K](Node& self) {
        if (!ln->requires_grad) {
            return;
        }
        ln->ensure_grad();
        const float g = self.grad[0] / static_cast<float>(N);
        for (int r = 0; r < N; ++r) {
            const float* xr = ln->data.data() + static_cast<size_t>(r) * K;
            float* dr = ln->grad.data() + static_cast<size_t>(r) * K;
            for (int j = 0; j < K; ++j) {
                float p = std::exp(xr[j] - lse[static_cast<size_t>(r)]);
                if (j == labels[static_cast<size_t>(r)]) {
                    p -= 1.0f;
                }
                dr[j] += g * p;
            }
        }
    });
    return Tensor(out);
}

} // namespace genrep
