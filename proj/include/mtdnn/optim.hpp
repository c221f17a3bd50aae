// Adam with bias correction, plus global-norm gradient clipping.
#pragma once

#include <cmath>
#include <vector>

#include "mtdnn/tensor.hpp"

namespace mtdnn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Rescales all gradients so their joint L2 norm is at most max_norm.
// max_norm <= 0 disables clipping. Returns the pre-clip norm.
template <typename T>
double clip_global_norm(const std::vector<Param<T>*>& params, double max_norm) {
    double sq = 0.0;
    for (const Param<T>* p : params)
        for (const T g : p->grad) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = T(max_norm / norm);
        for (Param<T>* p : params)
            for (T& g : p->grad) g *= s;
    }
    return norm;
}

template <typename T>
class Adam {
  public:
    Adam(std::vector<Param<T>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->value.size(), T(0));
            v_[i].assign(params_[i]->value.size(), T(0));
        }
    }

    // One update from the gradients currently held by the params.
    // lr_scale multiplies the configured lr (used for warmup).
    void step(double lr_scale = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        const T lr = T(cfg_.lr * lr_scale);
        const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
        const T eps = T(cfg_.eps);
        for (size_t i = 0; i < params_.size(); ++i) {
            Param<T>& p = *params_[i];
            T* __restrict__ m = m_[i].data();
            T* __restrict__ v = v_[i].data();
            for (size_t j = 0; j < p.value.size(); ++j) {
                const T g = p.grad[j];
                m[j] = b1 * m[j] + (T(1) - b1) * g;
                v[j] = b2 * v[j] + (T(1) - b2) * g * g;
                const T mhat = m[j] / T(bc1);
                const T vhat = v[j] / T(bc2);
                p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void zero_grad() {
        for (Param<T>* p : params_) p->zero_grad();
    }

    int64_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // Checkpoint access.
    std::vector<std::vector<T>>& moment1() { return m_; }
    std::vector<std::vector<T>>& moment2() { return v_; }
    void set_steps(int64_t t) { t_ = t; }

  private:
    std::vector<Param<T>*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace mtdnn
