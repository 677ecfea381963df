#include "card/optim.hpp"

#include "card/errors.hpp"

#include <cmath>
#include <numbers>

namespace card {

void AdamW::step(const std::vector<ParamRef>& params, double lr) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
            v_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
        }
    }
    if (m_.size() != params.size()) {
        throw InvalidArgument("AdamW: parameter list changed between steps");
    }
    double clip = 1.0;
    if (opts_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : params) {
            sq += p.grad->squaredNorm();
        }
        const double norm = std::sqrt(sq);
        if (norm > opts_.clip_norm) {
            clip = opts_.clip_norm / norm;
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat& w = *params[i].value;
        if (!params[i].grad->allFinite()) {
            throw NumericalFailure("AdamW: non-finite gradient");
        }
        const Mat g = clip * *params[i].grad;
        m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
        v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
        if (params[i].decay && opts_.weight_decay > 0.0) {
            w *= 1.0 - lr * opts_.weight_decay;
        }
        w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
    }
}

double cosine_lr(double base_lr, long step, long total_steps, long warmup_steps) {
    if (warmup_steps > 0 && step < warmup_steps) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const long span = std::max(1L, total_steps - warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace card
