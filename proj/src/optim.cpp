// SPDX-License-Identifier: Apache-2.0
#include "genrep/optim.hpp"

#include <cmath>

namespace genrep {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i]->tensor.numel(), 0.0f);
        v_[i].assign(params_[i]->tensor.numel(), 0.0f);
    }
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) {
        p->tensor.zero_grad();
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter* p = params_[i];
        if (!p->trainable) {
            continue;
        }
        const std::vector<float>& g = p->tensor.grad();
        if (g.size() != p->tensor.numel()) {
            throw ContractError("adamw: trainable parameter has no gradient: " + p->name);
        }
        float* w = p->tensor.data();
        const size_t n = p->tensor.numel();
        const bool decay = cfg_.weight_decay != 0.0 && p->tensor.rank() >= 2;
        const float decay_mul = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
        float* m = m_[i].data();
        float* v = v_[i].data();
        for (size_t j = 0; j < n; ++j) {
            if (decay) {
                w[j] *= decay_mul;
            }
            m[j] = static_cast<float>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j]);
            v[j] = static_cast<float>(cfg_.beta2 * v[j] +
                                      (1.0 - cfg_.beta2) * static_cast<double>(g[j]) * g[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

std::vector<float> AdamW::state_blob() const {
    std::vector<float> blob;
    for (size_t i = 0; i < params_.size(); ++i) {
        blob.insert(blob.end(), m_[i].begin(), m_[i].end());
        blob.insert(blob.end(), v_[i].begin(), v_[i].end());
    }
    return blob;
}

void AdamW::load_state_blob(const std::vector<float>& blob, int64_t step) {
    size_t off = 0;
    for (size_t i = 0; i < params_.size(); ++i) {
        const size_t n = m_[i].size();
        if (off + 2 * n > blob.size()) {
            throw ContractError("adamw: state blob too short");
        }
        std::copy(blob.begin() + off, blob.begin() + off + n, m_[i].begin());
        off += n;
        std::copy(blob.begin() + off, blob.begin() + off + n, v_[i].begin());
        off += n;
    }
    if (off != blob.size()) {
        throw ContractError("adamw: state blob size mismatch");
    }
    t_ = step;
}

} // namespace genrep
