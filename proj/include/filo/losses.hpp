#pragma once

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/tensor.hpp"

// Training objectives: global cross-entropy, focal loss, dice loss (exactly
// as printed: negative, no factor 2), and their local-loss composition.
namespace filo {

struct LossConfig {
    double gamma = 2.0; // focal focusing exponent
    double eps = 1e-7;  // numerical floor wherever logs appear
    // The printed dice form is -dot/(sum of squares); the conventional
    // 1 - 2*dot/(...) form is available for comparison runs.
    bool standard_dice = false;

    void validate() const {
        require(gamma >= 0.0, ErrorKind::config, "focal gamma must be >= 0");
        require(eps > 0.0, ErrorKind::config, "loss eps must be positive");
    }
};

// -(y log p + (1-y) log(1-p)) with p clamped to [eps, 1-eps].
inline ad::Var cross_entropy(const ad::Var& prob, double label, const LossConfig& cfg = {}) {
    cfg.validate();
    require(prob.val().size() == 1, ErrorKind::shape, "cross_entropy expects a scalar");
    require(label == 0.0 || label == 1.0, ErrorKind::data, "label must be 0 or 1");
    const ad::Var p = ad::clamp(prob, cfg.eps, 1.0 - cfg.eps);
    const ad::Var log_p = ad::log(p);
    const ad::Var log_not_p = ad::log(ad::add_const(ad::neg(p), 1.0));
    return ad::neg(ad::add(ad::mul_const(log_p, label), ad::mul_const(log_not_p, 1.0 - label)));
}

inline double cross_entropy_value(double prob, double label, const LossConfig& cfg = {}) {
    return cross_entropy(ad::Var::constant(Tensor::scalar(prob)), label, cfg).item();
}

// Mean over pixels of -(1-p_t)^gamma log(p_t), where p_t is the predicted
// probability of the true class: pred at anomaly pixels, 1-pred elsewhere.
inline ad::Var focal_loss(const ad::Var& pred, const Tensor& target, const LossConfig& cfg = {}) {
    cfg.validate();
    require(pred.val().same_shape(target), ErrorKind::shape, "focal_loss shape mismatch");
    for (std::int64_t i = 0; i < target.size(); ++i)
        require(target[i] == 0.0 || target[i] == 1.0, ErrorKind::data,
                "focal loss target must be binary");
    // p_t = (1 - t) + (2t - 1) * p, affine in p with constant coefficients.
    Tensor offset(target.shape);
    Tensor slope(target.shape);
    for (std::int64_t i = 0; i < target.size(); ++i) {
        offset[i] = 1.0 - target[i];
        slope[i] = 2.0 * target[i] - 1.0;
    }
    ad::Var p_t = ad::add(ad::mul_mask(pred, slope), ad::Var::constant(offset));
    p_t = ad::clamp(p_t, cfg.eps, 1.0 - cfg.eps);
    const ad::Var weight = ad::pow_const(ad::add_const(ad::neg(p_t), 1.0), cfg.gamma);
    return ad::neg(ad::mean(ad::mul(weight, ad::log(p_t))));
}

inline double focal_loss_value(const Tensor& pred, const Tensor& target,
                               const LossConfig& cfg = {}) {
    return focal_loss(ad::Var::constant(pred), target, cfg).item();
}

// -(sum y*yhat) / (sum y^2 + sum yhat^2 + eps), symmetric in its arguments.
inline ad::Var dice_loss(const ad::Var& pred, const Tensor& target, const LossConfig& cfg = {}) {
    cfg.validate();
    require(pred.val().same_shape(target), ErrorKind::shape, "dice_loss shape mismatch");
    const ad::Var target_v = ad::Var::constant(target);
    const ad::Var inter = ad::sum(ad::mul(pred, target_v));
    const ad::Var denom = ad::add_const(
        ad::add(ad::sum(ad::mul(pred, pred)), ad::sum(ad::mul(target_v, target_v))), cfg.eps);
    if (cfg.standard_dice)
        return ad::add_const(ad::neg(ad::div(ad::mul_const(inter, 2.0), denom)), 1.0);
    return ad::neg(ad::div(inter, denom));
}

inline double dice_loss_value(const Tensor& pred, const Tensor& target,
                              const LossConfig& cfg = {}) {
    return dice_loss(ad::Var::constant(pred), target, cfg).item();
}

// L_local = focal(M^a, G) + dice(M^a, G) + dice(M^n, 1 - G).
inline ad::Var local_loss(const ad::Var& fused_abnormal, const ad::Var& fused_normal,
                          const Tensor& ground_truth, const LossConfig& cfg = {}) {
    require(fused_abnormal.val().same_shape(ground_truth) &&
                fused_normal.val().same_shape(ground_truth),
            ErrorKind::shape, "local_loss shape mismatch");
    Tensor inverted(ground_truth.shape);
    for (std::int64_t i = 0; i < ground_truth.size(); ++i)
        inverted[i] = 1.0 - ground_truth[i];
    return ad::add(ad::add(focal_loss(fused_abnormal, ground_truth, cfg),
                           dice_loss(fused_abnormal, ground_truth, cfg)),
                   dice_loss(fused_normal, inverted, cfg));
}

inline double local_loss_value(const Tensor& fused_abnormal, const Tensor& fused_normal,
                               const Tensor& ground_truth, const LossConfig& cfg = {}) {
    return local_loss(ad::Var::constant(fused_abnormal), ad::Var::constant(fused_normal),
                      ground_truth, cfg)
        .item();
}

} // namespace filo
