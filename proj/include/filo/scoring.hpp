#pragma once

#include <string>
#include <vector>

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/rng.hpp"
#include "filo/prompts.hpp"

// Global scoring: the bottleneck adapter over the global image feature and
// the image-level anomaly score.
namespace filo {

// Bottleneck adapter without residual connection; with the default feature
// width of 768 the layers are exactly 768 -> 384 -> 768.
struct AdapterParams {
    ad::Var w1, b1; // [C/2, C], [C/2]
    ad::Var w2, b2; // [C, C/2], [C]

    // Zero-initialized output layer: an untrained adapter emits the zero
    // vector, pinning the untrained text term at one half.
    static AdapterParams init(int width, int bottleneck_divisor, rng::Rng& rng) {
        require(width > 0 && bottleneck_divisor > 0, ErrorKind::config,
                "bad adapter dimensions");
        const int hidden = std::max(1, width / bottleneck_divisor);
        AdapterParams p;
        p.w1 = ad::Var::leaf(Tensor::gaussian({hidden, width}, rng, std::sqrt(2.0 / width)));
        p.b1 = ad::Var::leaf(Tensor(std::vector<int>{hidden}, 0.0));
        p.w2 = ad::Var::leaf(Tensor(std::vector<int>{width, hidden}, 0.0));
        p.b2 = ad::Var::leaf(Tensor(std::vector<int>{width}, 0.0));
        return p;
    }

    int width() const { return w2.val().dim(0); }

    void validate() const {
        require(w1.defined() && b1.defined() && w2.defined() && b2.defined(),
                ErrorKind::config, "adapter not initialized");
        const int hidden = w1.val().dim(0), width_ = w1.val().dim(1);
        require(w2.val().dim(0) == width_ && w2.val().dim(1) == hidden &&
                    b1.val().dim(0) == hidden && b2.val().dim(0) == width_,
                ErrorKind::config, "adapter dimensions are inconsistent");
        require(w1.val().all_finite() && w2.val().all_finite() && b1.val().all_finite() &&
                    b2.val().all_finite(),
                ErrorKind::config, "adapter parameters must be finite");
    }
};

// A = SiLU(W2 ReLU(W1 G + b1) + b2); no residual connection.
inline ad::Var adapt(const ad::Var& global_feature, const AdapterParams& params) {
    params.validate();
    require(global_feature.val().ndim() == 1 &&
                global_feature.val().dim(0) == params.width(),
            ErrorKind::shape, "adapter input width mismatch");
    const ad::Var hidden = ad::relu(ad::linear(global_feature, params.w1, params.b1));
    return ad::silu(ad::linear(hidden, params.w2, params.b2));
}

struct ScoringConfig {
    double temperature = 100.0; // contrastive logit scale for the text term

    void validate() const {
        require(temperature > 0.0, ErrorKind::config, "temperature must be positive");
    }
};

struct ImageScore {
    double s_global = 0.0; // text_term + map_term, in [0, 2]
    double text_term = 0.0;
    double map_term = 0.0;

    // Human-facing display value; ranking metrics use s_global as-is.
    double display() const { return 0.5 * s_global; }
};

// Differentiable pieces of the global score, kept for the training loss.
struct ScoreVars {
    ad::Var text_term; // abnormal component of the two-class softmax
    ad::Var map_term;  // max over the final map
    ad::Var s_global;  // sum of the two

    ImageScore value() const {
        ImageScore s;
        s.text_term = text_term.item();
        s.map_term = map_term.item();
        s.s_global = s_global.item();
        return s;
    }
};

// Global anomaly score: the abnormal probability of a two-class softmax over
// (tau * A . F_n, tau * A . F_a), plus the maximum of the final map.
inline ScoreVars global_score(const ad::Var& adapted, const TextFeatureBank& text,
                              const ad::Var& final_map_values, const ScoringConfig& cfg) {
    cfg.validate();
    require(adapted.val().ndim() == 1 && adapted.val().dim(0) == text.width(),
            ErrorKind::shape, "adapted feature width does not match text features");
    const ad::Var logit_n = ad::mul_const(ad::dot(adapted, text.f_normal), cfg.temperature);
    const ad::Var logit_a = ad::mul_const(ad::dot(adapted, text.f_abnormal), cfg.temperature);
    ScoreVars out;
    out.text_term = ad::sigmoid(ad::sub(logit_a, logit_n));
    out.map_term = ad::max_all(final_map_values);
    out.s_global = ad::add(out.text_term, out.map_term);
    return out;
}

} // namespace filo
