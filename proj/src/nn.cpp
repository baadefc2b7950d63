// SPDX-License-Identifier: Apache-2.0
#include "genrep/nn.hpp"

#include <cmath>

namespace genrep {

Parameter& ParamRegistry::add(const std::string& name, Tensor t) {
    if (by_name_.count(name) != 0) {
        throw ConfigError("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->tensor = std::move(t);
    Parameter* raw = p.get();
    params_.push_back(std::move(p));
    by_name_[name] = raw;
    return *raw;
}

Parameter* ParamRegistry::find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParamRegistry::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

std::vector<Parameter*> ParamRegistry::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) {
        out.push_back(p.get());
    }
    return out;
}

std::vector<const Parameter*> ParamRegistry::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) {
        out.push_back(p.get());
    }
    return out;
}

void init_trunc_normal(Tensor& t, float sigma, Rng& rng) {
    for (float& v : t.vec()) {
        double z;
        do {
            z = rng.normal();
        } while (std::abs(z) > 2.0);
        v = static_cast<float>(z * sigma);
    }
}

void init_normal(Tensor& t, float sigma, Rng& rng) {
    for (float& v : t.vec()) {
        v = static_cast<float>(rng.normal() * sigma);
    }
}

void init_zeros(Tensor& t) { std::fill(t.vec().begin(), t.vec().end(), 0.0f); }
void init_ones(Tensor& t) { std::fill(t.vec().begin(), t.vec().end(), 1.0f); }

Tensor Linear::forward(const Tensor& x, const FwdCtx& ctx) const {
    Tensor y = linear(x, w->tensor, b != nullptr ? &b->tensor : nullptr);
    if (has_lora()) {
        Tensor xin = x;
        if (lora.dropout > 0.0f && ctx.train) {
            if (ctx.rng == nullptr) {
                throw ContractError("lora dropout needs an rng in train mode");
            }
            xin = dropout(x, lora.dropout, *ctx.rng, true);
        }
        Tensor h = linear(xin, lora.a->tensor, nullptr);
        Tensor d = linear(h, lora.b->tensor, nullptr);
        y = add(y, scale(d, lora.scale));
    }
    return y;
}

Linear make_linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng,
                   bool bias, bool zero_init) {
    Linear l;
    Tensor w = Tensor::zeros({out, in});
    if (!zero_init) {
        init_trunc_normal(w, 0.02f, rng);
    }
    l.w = &reg.add(name + ".weight", std::move(w));
    if (bias) {
        l.b = &reg.add(name + ".bias", Tensor::zeros({out}));
    }
    return l;
}

Tensor LayerNorm::forward(const Tensor& x) const {
    return layer_norm(x, gain->tensor, bias->tensor, eps);
}

LayerNorm make_layer_norm(ParamRegistry& reg, const std::string& name, int dim, float eps) {
    LayerNorm ln;
    ln.gain = &reg.add(name + ".gain", Tensor::full({dim}, 1.0f));
    ln.bias = &reg.add(name + ".bias", Tensor::zeros({dim}));
    ln.eps = eps;
    return ln;
}

Tensor norm_no_affine(const Tensor& x, float eps) {
    const int d = x.shape().back();
    static thread_local std::unordered_map<int, std::pair<Tensor, Tensor>> cache;
    auto it = cache.find(d);
    if (it == cache.end()) {
        it = cache.emplace(d, std::make_pair(Tensor::full({d}, 1.0f), Tensor::zeros({d}))).first;
    }
    return layer_norm(x, it->second.first, it->second.second, eps);
}

Tensor Mlp::forward(const Tensor& x, const FwdCtx& ctx) const {
    Tensor h = fc1.forward(x, ctx);
    h = act == Act::silu ? silu(h) : gelu(h);
    return fc2.forward(h, ctx);
}

Mlp make_mlp(ParamRegistry& reg, const std::string& name, int in, int hidden, int out, Act act,
             Rng& rng) {
    Mlp m;
    m.fc1 = make_linear(reg, name + ".fc1", in, hidden, rng);
    m.fc2 = make_linear(reg, name + ".fc2", hidden, out, rng);
    m.act = act;
    return m;
}

Tensor SelfAttention::forward(const Tensor& x, const FwdCtx& ctx) const {
    return forward_kv(x, x, ctx);
}

Tensor SelfAttention::forward_kv(const Tensor& q_in, const Tensor& kv_in,
                                 const FwdCtx& ctx) const {
    Tensor q = wq.forward(q_in, ctx);
    Tensor k = wk.forward(kv_in, ctx);
    Tensor v = wv.forward(kv_in, ctx);
    Tensor o = attention(q, k, v, heads);
    return wo.forward(o, ctx);
}

SelfAttention make_attention(ParamRegistry& reg, const std::string& name, int dim, int heads,
                             Rng& rng) {
    if (heads < 1 || dim % heads != 0) {
        throw ConfigError("attention dim must be divisible by heads");
    }
    SelfAttention a;
    a.wq = make_linear(reg, name + ".wq", dim, dim, rng);
    a.wk = make_linear(reg, name + ".wk", dim, dim, rng);
    a.wv = make_linear(reg, name + ".wv", dim, dim, rng);
    a.wo = make_linear(reg, name + ".wo", dim, dim, rng);
    a.heads = heads;
    return a;
}

long trainable_param_count(const std::vector<Parameter*>& params) {
    long n = 0;
    for (const Parameter* p : params) {
        if (p->trainable) {
            n += static_cast<long>(p->tensor.numel());
        }
    }
    return n;
}

} // namespace genrep
