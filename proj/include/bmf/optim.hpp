#pragma once

#include "bmf/params.hpp"

namespace bmf {

template <typename T>
struct AdamConfig {
    T lr = T(5e-5);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(1e-3);
    bool decoupled_decay = true;  // AdamW-style; false folds decay into the gradient
};

// Adam with per-parameter moment buffers. step() throws if any parameter
// has no gradient buffer.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamConfig<T> cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), T(0));
            v_[i].assign(params_[i].numel(), T(0));
        }
    }

    void step() {
        ++step_;
        T bc1 = T(1) - std::pow(cfg_.beta1, T(step_));
        T bc2 = T(1) - std::pow(cfg_.beta2, T(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            check(!p.grad().empty(), "adam: parameter ", i, " has no gradient");
            auto pv = p.raw_data();
            auto g = p.grad();
            for (int64_t j = 0; j < p.numel(); ++j) {
                T grad = g[j];
                if (!cfg_.decoupled_decay && cfg_.weight_decay != T(0))
                    grad += cfg_.weight_decay * pv[j];
                else if (cfg_.decoupled_decay && cfg_.weight_decay != T(0))
                    pv[j] -= cfg_.lr * cfg_.weight_decay * pv[j];
                m_[i][j] = cfg_.beta1 * m_[i][j] + (T(1) - cfg_.beta1) * grad;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (T(1) - cfg_.beta2) * grad * grad;
                T m_hat = m_[i][j] / bc1;
                T v_hat = v_[i][j] / bc2;
                pv[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    int64_t step_count() const { return step_; }
    const AdamConfig<T>& config() const { return cfg_; }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    int64_t step_ = 0;
    AdamConfig<T> cfg_;
};

}  // namespace bmf
