#pragma once

#include "card/linalg.hpp"

#include <vector>

namespace card {

struct ParamRef {
    Mat* value;
    const Mat* grad;
    bool decay = true;
};

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    /// Global gradient-norm clip applied before the update; 0 disables it.
    double clip_norm = 0.0;
};

/// Adaptive moment estimation with decoupled weight decay. Moment buffers are
/// keyed by position in the parameter list, which must be stable across steps.
class AdamW {
public:
    explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

    void step(const std::vector<ParamRef>& params, double lr);
    long steps() const { return t_; }

private:
    AdamWOptions opts_;
    long t_ = 0;
    std::vector<Mat> m_, v_;
};

/// Cosine decay to zero after a linear warmup.
double cosine_lr(double base_lr, long step, long total_steps, long warmup_steps);

}  // namespace card
