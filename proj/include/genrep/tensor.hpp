// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "genrep/common.hpp"
#include "genrep/rng.hpp"

namespace genrep {

// One node of the dynamically-built reverse-mode graph. Values are float32
// row-major; rank <= 3 with [B, L, D] convention for rank-3 token streams.
struct Node {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad; // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;

    size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0f);
        }
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float v);

    bool defined() const { return node != nullptr; }
    const std::vector<int>& shape() const { return node->shape; }
    int rank() const { return static_cast<int>(node->shape.size()); }
    int dim(int i) const { return node->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node->numel(); }
    float* data() { return node->data.data(); }
    const float* data() const { return node->data.data(); }
    std::vector<float>& vec() { return node->data; }
    const std::vector<float>& vec() const { return node->data; }
    float item() const;

    bool requires_grad() const { return node->requires_grad; }
    void set_requires_grad(bool on) { node->requires_grad = on; }
    const std::vector<float>& grad() const { return node->grad; }
    void zero_grad() { node->grad.clear(); }

    // Reverse-mode sweep from a scalar loss. Grads accumulate across calls.
    void backward() const;

    std::shared_ptr<Node> node;
};

// Thread-local guard; while active, ops record no graph (eval/inference).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor dropout(const Tensor& a, float p, Rng& rng, bool train);

// ---- shape / indexing ----
Tensor reshape(const Tensor& a, std::vector<int> shape);
// rank-3 [B,L,D]: concatenate along the token axis
Tensor concat_axis1(const Tensor& a, const Tensor& b);
Tensor slice_axis1(const Tensor& a, int start, int len);
// idx has size B*M with values in [0,L); gathers per-sample token subsets
Tensor gather_axis1(const Tensor& x, const std::vector<int>& idx, int M);
// row[D] -> [B,count,D]; grads sum over all copies
Tensor tile_token(const Tensor& row, int batch, int count = 1);
// table[L,D] lookup with flattened per-batch ids -> [B,M,D]
Tensor embed_rows(const Tensor& table, const std::vector<int>& idx, int B, int M);
// x[B,L,D] + pos[L,D] broadcast over batch
Tensor add_posemb(const Tensor& x, const Tensor& pos);
Tensor mean_axis1(const Tensor& x); // [B,L,D] -> [B,D]

// ---- normalization / modulation ----
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
// y = x * (1 + scale_b) + shift_b, broadcast over tokens
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);
// y = base + gate_b * delta, broadcast over tokens
Tensor gated_add(const Tensor& base, const Tensor& gate, const Tensor& delta);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b); // [m,k] x [k,n]
Tensor matmul_ex(const Tensor& a, const Tensor& b, bool ta, bool tb);
// x[...,in] * w[out,in]^T + b; rank-2 or rank-3 x
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b);
// q[(B,)Lq,D], k/v[(B,)Lk,D]; per-head softmax(q k^T / sqrt(D/heads)) v
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

// ---- reductions / losses ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_sq_diff(const Tensor& a, const Tensor& b);
// logits [N,K]; mean negative log-softmax of the true class
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels);

} // namespace genrep
