#pragma once

#include <string>
#include <vector>

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/rng.hpp"
#include "filo/prompts.hpp"

// Localization core: multi-scale multi-shape cross-modal interaction over
// the V-V patch grids, linear alignment over the QKV grids, per-stage map
// fusion, and the smoothed final map.
namespace filo {

struct KernelShape {
    int height = 1;
    int width = 1;
};

// One trainable convolution kernel of the MMCI bank, [kh, kw, C, C].
struct KernelSpec {
    KernelShape shape;
    ad::Var weights;

    static KernelSpec init(KernelShape shape, int channels, rng::Rng& rng) {
        require(shape.height % 2 == 1 && shape.width % 2 == 1, ErrorKind::config,
                "kernel dims must be odd");
        KernelSpec k;
        k.shape = shape;
        const double fan_in = static_cast<double>(shape.height) * shape.width * channels;
        k.weights = ad::Var::leaf(Tensor::gaussian(
            {shape.height, shape.width, channels, channels}, rng, std::sqrt(2.0 / fan_in)));
        return k;
    }
};

inline std::vector<KernelShape> default_kernel_shapes() {
    return {{1, 1}, {3, 3}, {5, 5}, {7, 7}, {1, 5}, {5, 1}};
}

struct SmoothingConfig {
    double sigma = 4.0;

    void validate() const {
        require(sigma > 0.0, ErrorKind::config, "smoothing sigma must be positive");
    }
};

struct LocmapOptions {
    // Sum per-kernel softmaxes (the printed form). The logit-sum variant
    // applies one softmax to summed logits instead; kept for ablations.
    bool sum_logits = false;
};

// Paired normal/abnormal maps for one stage/path at output resolution.
struct StageMaps {
    ad::Var normal;
    ad::Var abnormal;
};

namespace detail {

// Two-class softmax per position from a pair of logit maps. The normal
// probability is sigmoid(n - a); the pair sums to one by construction.
inline StageMaps softmax_pair(const ad::Var& logits_n, const ad::Var& logits_a) {
    StageMaps m;
    m.normal = ad::sigmoid(ad::sub(logits_n, logits_a));
    m.abnormal = ad::sigmoid(ad::sub(logits_a, logits_n));
    return m;
}

inline StageMaps finalize_stage_maps(std::vector<StageMaps> per_kernel,
                                     std::vector<std::pair<ad::Var, ad::Var>> per_kernel_logits,
                                     bool sum_logits, int out_h, int out_w) {
    ad::Var sum_n, sum_a;
    if (sum_logits) {
        ad::Var ln = per_kernel_logits[0].first, la = per_kernel_logits[0].second;
        for (std::size_t j = 1; j < per_kernel_logits.size(); ++j) {
            ln = ad::add(ln, per_kernel_logits[j].first);
            la = ad::add(la, per_kernel_logits[j].second);
        }
        StageMaps sm = softmax_pair(ln, la);
        sum_n = sm.normal;
        sum_a = sm.abnormal;
    } else {
        sum_n = per_kernel[0].normal;
        sum_a = per_kernel[0].abnormal;
        for (std::size_t j = 1; j < per_kernel.size(); ++j) {
            sum_n = ad::add(sum_n, per_kernel[j].normal);
            sum_a = ad::add(sum_a, per_kernel[j].abnormal);
        }
    }
    StageMaps out;
    out.normal = ad::upsample_bilinear(ad::minmax_norm(sum_n), out_h, out_w);
    out.abnormal = ad::upsample_bilinear(ad::minmax_norm(sum_a), out_h, out_w);
    return out;
}

} // namespace detail

// MMCI stage maps: each kernel of the bank convolves the V-V patch grid,
// scores every position against (F_n, F_a), and the per-kernel softmaxes are
// summed; the summed pair is min-max normalized and bilinearly upsampled to
// the output resolution.
inline StageMaps mmci_stage_maps(const ad::Var& vv_patches, const TextFeatureBank& text,
                                 const std::vector<KernelSpec>& kernels, int out_h,
                                 int out_w, const LocmapOptions& opts = {}) {
    require(!kernels.empty(), ErrorKind::config, "MMCI kernel bank is empty");
    const Tensor& grid = vv_patches.val();
    require(grid.ndim() == 3, ErrorKind::shape, "patch grid must be [H,W,C]");
    require(grid.dim(2) == text.width(), ErrorKind::config,
            "text width does not match patch width");
    std::vector<StageMaps> per_kernel;
    std::vector<std::pair<ad::Var, ad::Var>> per_kernel_logits;
    for (const auto& k : kernels) {
        const ad::Var convolved = ad::conv2d_same(vv_patches, k.weights);
        ad::Var ln = ad::channel_dot(convolved, text.f_normal);
        ad::Var la = ad::channel_dot(convolved, text.f_abnormal);
        if (opts.sum_logits)
            per_kernel_logits.emplace_back(std::move(ln), std::move(la));
        else
            per_kernel.push_back(detail::softmax_pair(ln, la));
    }
    return detail::finalize_stage_maps(std::move(per_kernel), std::move(per_kernel_logits),
                                       opts.sum_logits, out_h, out_w);
}

// QKV stage maps: the same scoring route with a per-stage linear alignment
// map (weights [C, C] plus bias) in place of the kernel bank.
inline StageMaps qkv_stage_maps(const ad::Var& qkv_patches, const TextFeatureBank& text,
                                const ad::Var& linear_w, const ad::Var& linear_b,
                                int out_h, int out_w) {
    const Tensor& grid = qkv_patches.val();
    require(grid.ndim() == 3, ErrorKind::shape, "patch grid must be [H,W,C]");
    const int c = grid.dim(2);
    require(linear_w.val().ndim() == 2 && linear_w.val().dim(0) == c &&
                linear_w.val().dim(1) == c,
            ErrorKind::config, "stage linear map must be [C,C]");
    require(text.width() == c, ErrorKind::config, "text width does not match patch width");

    // Applying W at every position then scoring is algebraically the dot of
    // the raw patches with text-side pullbacks:
    //   (W p + b) . F = p . (W^T F) + b . F
    ad::Var wtf_n = ad::matvec_transposed(linear_w, text.f_normal);
    ad::Var wtf_a = ad::matvec_transposed(linear_w, text.f_abnormal);
    ad::Var ln = ad::add(ad::channel_dot(qkv_patches, wtf_n), ad::dot(linear_b, text.f_normal));
    ad::Var la = ad::add(ad::channel_dot(qkv_patches, wtf_a), ad::dot(linear_b, text.f_abnormal));

    StageMaps sm = detail::softmax_pair(ln, la);
    StageMaps out;
    out.normal = ad::upsample_bilinear(ad::minmax_norm(sm.normal), out_h, out_w);
    out.abnormal = ad::upsample_bilinear(ad::minmax_norm(sm.abnormal), out_h, out_w);
    return out;
}

// Fused maps: elementwise sum of every stage/path map per kind, then min-max
// normalization of each fused map.
struct FusedMaps {
    ad::Var normal;
    ad::Var abnormal;
};

struct SummedMaps {
    ad::Var normal;
    ad::Var abnormal;
};

// The summation half of the fusion; box suppression slots between the sum
// and the normalization (the filtering step runs on the summed maps).
inline SummedMaps sum_stage_maps(const std::vector<StageMaps>& stage_maps) {
    require(!stage_maps.empty(), ErrorKind::data, "fuse_maps: no stage maps");
    SummedMaps out;
    out.normal = stage_maps[0].normal;
    out.abnormal = stage_maps[0].abnormal;
    for (std::size_t i = 1; i < stage_maps.size(); ++i) {
        out.normal = ad::add(out.normal, stage_maps[i].normal);
        out.abnormal = ad::add(out.abnormal, stage_maps[i].abnormal);
    }
    return out;
}

inline FusedMaps fuse_maps(const std::vector<StageMaps>& stage_maps) {
    const SummedMaps summed = sum_stage_maps(stage_maps);
    FusedMaps out;
    out.normal = ad::minmax_norm(summed.normal);
    out.abnormal = ad::minmax_norm(summed.abnormal);
    return out;
}

// Final localization map: Gaussian-smoothed (M^a + 1 - M^n) / 2, clamped to
// [0, 1].
inline ad::Var final_map(const ad::Var& fused_normal, const ad::Var& fused_abnormal,
                         const SmoothingConfig& smoothing) {
    smoothing.validate();
    require(fused_normal.val().same_shape(fused_abnormal.val()), ErrorKind::shape,
            "fused maps must share shape");
    const ad::Var combined = ad::mul_const(
        ad::add_const(ad::sub(fused_abnormal, fused_normal), 1.0), 0.5);
    return ad::clamp(ad::gaussian_blur(combined, smoothing.sigma), 0.0, 1.0);
}

// Variant with box suppression: the combined per-pixel anomaly score is the
// quantity the detector evidence gates, so lambda applies to it before
// smoothing. With no boxes this reduces to the plain final map.
inline ad::Var final_map_suppressed(const ad::Var& fused_normal, const ad::Var& fused_abnormal,
                                    const Tensor& suppression, // multiplier mask, or empty
                                    const SmoothingConfig& smoothing) {
    smoothing.validate();
    require(fused_normal.val().same_shape(fused_abnormal.val()), ErrorKind::shape,
            "fused maps must share shape");
    ad::Var combined = ad::mul_const(
        ad::add_const(ad::sub(fused_abnormal, fused_normal), 1.0), 0.5);
    if (suppression.defined()) {
        require(suppression.same_shape(combined.val()), ErrorKind::shape,
                "suppression mask shape mismatch");
        combined = ad::mul_mask(combined, suppression);
    }
    return ad::clamp(ad::gaussian_blur(combined, smoothing.sigma), 0.0, 1.0);
}

} // namespace filo
