#pragma once

#include <string>
#include <vector>

#include "filo/backbone.hpp"
#include "filo/core/rng.hpp"
#include "filo/core/tensor.hpp"
#include "filo/prompts.hpp"

// Interface conformance checks. Any image-encoder implementation (the stub
// or a real-weight adapter feeding features through the file backbone) must
// pass these shape/determinism checks.
namespace filo {

struct ConformanceResult {
    std::vector<std::string> failures;
    bool ok() const { return failures.empty(); }
};

inline ConformanceResult run_backbone_conformance(const ImageEncoder& encoder,
                                                  std::uint64_t seed,
                                                  const std::string& image_id = {}) {
    ConformanceResult result;
    const BackboneConfig& cfg = encoder.config();
    auto check = [&](bool cond, const std::string& msg) {
        if (!cond) result.failures.push_back(msg);
    };

    rng::Rng r(rng::substream(seed, "conformance/image"));
    Tensor image(std::vector<int>{cfg.input_resolution, cfg.input_resolution, 3});
    for (auto& v : image.v) v = r.uniform(-1.0, 1.0);

    ImageFeatures a, b;
    try {
        a = encoder.encode_image(image, image_id);
        b = encoder.encode_image(image, image_id);
    } catch (const Error& e) {
        result.failures.push_back(std::string("encode_image threw: ") + e.what());
        return result;
    }

    check(a.global_feature.ndim() == 1 && a.global_feature.dim(0) == cfg.feature_width,
          "global feature must be a width-C vector");
    check(a.global_feature.all_finite(), "global feature must be finite");
    check(static_cast<int>(a.stages.size()) == cfg.stage_count(),
          "stage count must match the config");
    const int g = cfg.grid();
    for (std::size_t s = 0; s < a.stages.size(); ++s) {
        const auto& st = a.stages[s];
        const std::string tag = "stage " + std::to_string(s) + ": ";
        check(st.qkv_patches.ndim() == 3 && st.qkv_patches.dim(0) == g &&
                  st.qkv_patches.dim(1) == g && st.qkv_patches.dim(2) == cfg.feature_width,
              tag + "qkv grid must be [grid,grid,C]");
        check(st.qkv_patches.same_shape(st.vv_patches), tag + "qkv/vv grids must share shape");
        check(st.qkv_patches.all_finite() && st.vv_patches.all_finite(),
              tag + "patch features must be finite");
    }

    check(max_abs_diff(a.global_feature, b.global_feature) == 0.0,
          "encode_image must be deterministic (global feature differs)");
    for (std::size_t s = 0; s < a.stages.size() && s < b.stages.size(); ++s) {
        check(max_abs_diff(a.stages[s].qkv_patches, b.stages[s].qkv_patches) == 0.0,
              "encode_image must be deterministic (qkv stage " + std::to_string(s) + ")");
        check(max_abs_diff(a.stages[s].vv_patches, b.stages[s].vv_patches) == 0.0,
              "encode_image must be deterministic (vv stage " + std::to_string(s) + ")");
    }

    // Wrong input shape must be rejected.
    bool threw = false;
    try {
        Tensor bad(std::vector<int>{cfg.input_resolution + cfg.patch_size,
                                    cfg.input_resolution, 3});
        encoder.encode_image(bad, image_id);
    } catch (const Error&) {
        threw = true;
    } catch (...) {
        threw = true;
    }
    if (dynamic_cast<const StubBackbone*>(&encoder) != nullptr)
        check(threw, "encode_image must reject wrong input shapes");
    return result;
}

inline ConformanceResult run_text_encoder_conformance(const TextEncoder& encoder) {
    ConformanceResult result;
    auto check = [&](bool cond, const std::string& msg) {
        if (!cond) result.failures.push_back(msg);
    };
    std::vector<TextToken> tokens = {TextToken::from_word("a"), TextToken::from_word("b")};
    const Tensor f1 = encoder.encode(tokens).val();
    const Tensor f2 = encoder.encode(tokens).val();
    check(f1.ndim() == 1 && f1.dim(0) == encoder.width(), "encoding must be a width-C vector");
    check(std::abs(f1.norm2() - 1.0) <= 1e-5, "encoding must be unit-norm");
    check(max_abs_diff(f1, f2) == 0.0, "encode must be deterministic");
    bool threw = false;
    try {
        encoder.encode({});
    } catch (const Error&) {
        threw = true;
    }
    check(threw, "empty token sequence must be rejected");
    return result;
}

} // namespace filo
