// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "genrep/tensor.hpp"

namespace genrep {

// Named trainable leaf. Freezing drops it from optimizer updates and from
// gradient accumulation, but never from the forward computation.
struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;

    void set_trainable(bool on) {
        trainable = on;
        tensor.set_requires_grad(on);
    }
};

// Owns the parameters of one model. Iteration order is registration order,
// which keeps optimizer updates and checkpoints deterministic.
class ParamRegistry {
public:
    Parameter& add(const std::string& name, Tensor t);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    size_t size() const { return params_.size(); }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

// Per-forward context: train/eval switch plus the rng used by dropout.
struct FwdCtx {
    bool train = false;
    Rng* rng = nullptr;
};

// ---- init ----
void init_trunc_normal(Tensor& t, float sigma, Rng& rng); // resample beyond 2 sigma
void init_normal(Tensor& t, float sigma, Rng& rng);
void init_zeros(Tensor& t);
void init_ones(Tensor& t);

// ---- layers ----
enum class Act { silu, gelu };

struct LoraAdapter {
    Parameter* a = nullptr; // [rank, in]
    Parameter* b = nullptr; // [out, rank]
    float scale = 0.0f;     // alpha / rank
    float dropout = 0.0f;
};

struct Linear {
    Parameter* w = nullptr; // [out, in]
    Parameter* b = nullptr; // optional
    LoraAdapter lora;

    bool has_lora() const { return lora.a != nullptr; }
    Tensor forward(const Tensor& x, const FwdCtx& ctx) const;
};

Linear make_linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng,
                   bool bias = true, bool zero_init = false);

struct LayerNorm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
    float eps = 1e-5f;

    Tensor forward(const Tensor& x) const;
};

LayerNorm make_layer_norm(ParamRegistry& reg, const std::string& name, int dim,
                          float eps = 1e-5f);

// LayerNorm without affine parameters (modulation supplies scale/shift).
Tensor norm_no_affine(const Tensor& x, float eps = 1e-6f);

struct Mlp {
    Linear fc1;
    Linear fc2;
    Act act = Act::silu;

    Tensor forward(const Tensor& x, const FwdCtx& ctx) const;
};

Mlp make_mlp(ParamRegistry& reg, const std::string& name, int in, int hidden, int out,
             Act act, Rng& rng);

struct SelfAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;

    Tensor forward(const Tensor& x, const FwdCtx& ctx) const;
    // cross-attention: queries from q_in, keys/values from kv_in
    Tensor forward_kv(const Tensor& q_in, const Tensor& kv_in, const FwdCtx& ctx) const;
};

SelfAttention make_attention(ParamRegistry& reg, const std::string& name, int dim, int heads,
                             Rng& rng);

// Pretty count used in logs and tests.
long trainable_param_count(const std::vector<Parameter*>& params);

} // namespace genrep
