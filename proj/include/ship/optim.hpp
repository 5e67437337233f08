#pragma once

#include <vector>

#include "ship/tensor.hpp"

namespace ship {

// lr(t) = lr * 0.5 * (1 + cos(pi t / T)); lr(0) = lr, lr(T) ~ 0.
inline double cosine_lr(double base_lr, std::size_t t, std::size_t total) {
    if (total == 0) return base_lr;
    const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
    return base_lr * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay. A step first validates every gradient;
// non-finite gradients abort before any parameter is touched.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    std::size_t step_count() const { return t_; }

    // lr_scale multiplies cfg.lr (cosine schedule hooks in here).
    void step(double lr_scale = 1.0) {
        for (const Tensor& p : params_) {
            for (double g : p.grad()) {
                if (!std::isfinite(g)) {
                    throw NumericError("AdamW: non-finite gradient, aborting step " +
                                       std::to_string(t_ + 1));
                }
            }
        }
        ++t_;
        const double lr = cfg_.lr * lr_scale;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            const std::vector<double>& g = p.grad();
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p.at(j) -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.at(j));
            }
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace ship
