#pragma once

#include <cmath>
#include <vector>

#include "dfar/nn.hpp"

namespace dfar {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction and a constant learning rate.
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& [name, p] : params_) {
            m_.push_back(Tensor<T>::zeros(p.shape()));
            v_.push_back(Tensor<T>::zeros(p.shape()));
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    /// One update using the accumulated gradients scaled by `grad_scale`.
    void step(double grad_scale = 1.0) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Var<T>& p = params_[k].second;
            const Tensor<T>& g = p.grad();
            if (g.empty()) continue;
            auto& x = p.mutable_value();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double gi = static_cast<double>(g[i]) * grad_scale;
                const double mi = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                x[i] -= static_cast<T>(cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
            }
        }
    }

    long long steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return cfg_; }
    const ParamList<T>& params() const noexcept { return params_; }

private:
    ParamList<T> params_;
    AdamConfig cfg_;
    std::vector<Tensor<T>> m_, v_;
    long long t_ = 0;
};

}  // namespace dfar
