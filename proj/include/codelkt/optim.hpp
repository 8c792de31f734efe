#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "codelkt/common.hpp"

namespace codelkt {

/// A trainable tensor viewed as a flat span, paired with its gradient buffer.
struct ParamView {
    std::span<double> value;
    std::span<double> grad;
    bool decay = true;
};

/// Adam with decoupled weight decay; decay applies only to views flagged `decay`.
class AdamW {
public:
    struct Options {
        double learning_rate = 5e-5;
        double weight_decay = 0.01;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double epsilon = 1e-8;
    };

    AdamW(std::vector<ParamView> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            if (p.value.size() != p.grad.size()) throw Error(ErrorKind::precondition, "parameter/gradient size mismatch");
            m_.emplace_back(p.value.size(), 0.0);
            v_.emplace_back(p.value.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            auto& m = m_[k];
            auto& v = v_[k];
            const double decay = p.decay ? opt_.learning_rate * opt_.weight_decay : 0.0;
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.value[i] -= decay * p.value[i];
                p.value[i] -= opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.epsilon);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
    }

    long steps() const { return t_; }

private:
    std::vector<ParamView> params_;
    Options opt_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    long t_ = 0;
};

}  // namespace codelkt
