#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "filo/backbone.hpp"
#include "filo/config.hpp"
#include "filo/core/autograd.hpp"
#include "filo/data_eval.hpp"
#include "filo/grounding.hpp"
#include "filo/locmap.hpp"
#include "filo/losses.hpp"
#include "filo/prompts.hpp"
#include "filo/scoring.hpp"

// Model assembly and the end-to-end forward pass shared by training,
// evaluation, and single-image inference.
namespace filo {

struct StageHead {
    std::vector<KernelSpec> kernels; // MMCI bank over the V-V path
    ad::Var qkv_w, qkv_b;            // linear alignment over the QKV path
};

struct ForwardOutput {
    std::vector<DetectionBox> boxes;
    std::optional<std::string> position;
    TextFeatureBank text;
    FusedMaps fused; // abnormal map is post-suppression
    ad::Var final_map;
    ScoreVars score;
    ad::Var global_feature;
};

class FiloModel {
public:
    static FiloModel create(const RunConfig& cfg, DescriptionRegistry registry) {
        cfg.validate();
        registry.validate();
        FiloModel m;
        m.cfg_ = cfg;
        m.registry_ = std::move(registry);

        const BackboneConfig bcfg = cfg.backbone_config();
        if (cfg.backbone.kind == "file")
            m.image_encoder_ = std::make_unique<FeatureFileBackbone>(bcfg, cfg.backbone.features_dir);
        else
            m.image_encoder_ = std::make_unique<StubBackbone>(bcfg);
        m.text_encoder_ =
            std::make_unique<StubTextEncoder>(bcfg.feature_width, rng::substream(cfg.seed, "text"));

        if (cfg.grounding.detector == "stub")
            m.detector_ = std::make_unique<StubDetector>(cfg.stub_detector_params());
        else if (cfg.grounding.detector == "file")
            m.detector_ = std::make_unique<FileDetector>(cfg.grounding.boxes_dir);

        const int c = bcfg.feature_width;
        rng::Rng ctx_rng(rng::substream(cfg.seed, "init/ctx"));
        m.ctx_ = ContextVectors::init(cfg.prompts.n_ctx, c, cfg.prompts.ctx_init_std, ctx_rng);
        rng::Rng meta_rng(rng::substream(cfg.seed, "init/meta"));
        m.meta_ = MetaNet::init(c, c, cfg.prompts.meta_bottleneck_divisor, meta_rng);

        for (int s = 0; s < bcfg.stage_count(); ++s) {
            StageHead head;
            rng::Rng krng(rng::substream(cfg.seed, "init/mmci/" + std::to_string(s)));
            for (const KernelShape& shape : cfg.kernel_shapes())
                head.kernels.push_back(KernelSpec::init(shape, c, krng));
            rng::Rng lrng(rng::substream(cfg.seed, "init/qkv/" + std::to_string(s)));
            head.qkv_w = ad::Var::leaf(Tensor::gaussian({c, c}, lrng, std::sqrt(2.0 / c)));
            head.qkv_b = ad::Var::leaf(Tensor(std::vector<int>{c}, 0.0));
            m.heads_.push_back(std::move(head));
        }

        rng::Rng arng(rng::substream(cfg.seed, "init/adapter"));
        m.adapter_ = AdapterParams::init(c, cfg.scoring.adapter_bottleneck_divisor, arng);
        return m;
    }

    const RunConfig& cfg() const { return cfg_; }
    const DescriptionRegistry& registry() const { return registry_; }
    const ImageEncoder& image_encoder() const { return *image_encoder_; }
    const TextEncoder& text_encoder() const { return *text_encoder_; }
    const Detector* detector() const { return detector_.get(); }
    ContextVectors& ctx() { return ctx_; }
    MetaNet& meta() { return meta_; }
    std::vector<StageHead>& heads() { return heads_; }
    AdapterParams& adapter() { return adapter_; }
    const AdapterParams& adapter() const { return adapter_; }

    // Stable name -> parameter mapping; the order defines optimizer and
    // checkpoint layout. The returned handles share storage with the model.
    std::vector<std::pair<std::string, ad::Var>> named_params() const {
        std::vector<std::pair<std::string, ad::Var>> out;
        out.emplace_back("prompts/ctx_normal", ctx_.normal_ctx);
        out.emplace_back("prompts/ctx_abnormal", ctx_.abnormal_ctx);
        out.emplace_back("prompts/meta_w1", meta_.w1);
        out.emplace_back("prompts/meta_b1", meta_.b1);
        out.emplace_back("prompts/meta_w2", meta_.w2);
        out.emplace_back("prompts/meta_b2", meta_.b2);
        for (std::size_t s = 0; s < heads_.size(); ++s) {
            const std::string prefix = "locmap/stage" + std::to_string(s);
            for (std::size_t k = 0; k < heads_[s].kernels.size(); ++k)
                out.emplace_back(prefix + "/mmci_k" + std::to_string(k),
                                 heads_[s].kernels[k].weights);
            out.emplace_back(prefix + "/qkv_w", heads_[s].qkv_w);
            out.emplace_back(prefix + "/qkv_b", heads_[s].qkv_b);
        }
        out.emplace_back("scoring/adapter_w1", adapter_.w1);
        out.emplace_back("scoring/adapter_b1", adapter_.b1);
        out.emplace_back("scoring/adapter_w2", adapter_.w2);
        out.emplace_back("scoring/adapter_b2", adapter_.b2);
        return out;
    }

    // Precomputed per-image inputs that stay constant across training epochs
    // (the backbone is frozen and detection does not depend on trainables).
    struct EncodedSample {
        std::string image_id;
        std::string class_name;
        ImageFeatures features;
        std::vector<DetectionBox> boxes;
        std::optional<std::string> position;
    };

    EncodedSample encode_sample(const Image& resized, const Tensor& normalized,
                                const std::string& image_id,
                                const std::string& class_name) const {
        require(registry_.has_class(class_name), ErrorKind::data,
                "class not registered: " + class_name);
        EncodedSample enc;
        enc.image_id = image_id;
        enc.class_name = class_name;
        enc.features = image_encoder_->encode_image(normalized, image_id);
        if (detector_) {
            enc.boxes = detect(resized, image_id, registry_.phrases(class_name), *detector_,
                               cfg_.suppression_config());
            enc.position = position_phrase(enc.boxes);
        }
        return enc;
    }

    ForwardOutput forward(const EncodedSample& enc) const {
        const int res = cfg_.backbone.input_resolution;
        ForwardOutput out;
        out.boxes = enc.boxes;
        out.position = enc.position;
        out.global_feature = ad::Var::constant(enc.features.global_feature);

        // Position-enhanced prompts and grouped text features.
        const PromptSet prompts =
            expand_templates(registry_, enc.class_name, enc.position, cfg_.prompts.n_ctx);
        std::optional<ad::Var> meta_bias;
        if (cfg_.prompts.conditional) meta_bias = meta_.bias(out.global_feature);
        out.text = encode_prompts(prompts, ctx_, *text_encoder_, meta_bias);

        // Per-stage maps from both attention paths.
        std::vector<StageMaps> stage_maps;
        for (std::size_t s = 0; s < heads_.size(); ++s) {
            const auto& stage = enc.features.stages[s];
            stage_maps.push_back(qkv_stage_maps(ad::Var::constant(stage.qkv_patches), out.text,
                                                heads_[s].qkv_w, heads_[s].qkv_b, res, res));
            stage_maps.push_back(mmci_stage_maps(ad::Var::constant(stage.vv_patches), out.text,
                                                 heads_[s].kernels, res, res,
                                                 cfg_.locmap_options()));
        }

        // Box filtering gates the combined per-pixel anomaly score between
        // fusion and smoothing; the fused maps themselves (the training
        // targets) stay as summed-and-normalized.
        out.fused = fuse_maps(stage_maps);
        Tensor suppression;
        if (!enc.boxes.empty()) {
            const SuppressionConfig scfg = cfg_.suppression_config();
            scfg.validate();
            suppression = suppression_mask(res, res, enc.boxes, scfg.lambda);
        }
        out.final_map = final_map_suppressed(out.fused.normal, out.fused.abnormal, suppression,
                                             cfg_.smoothing_config());

        const ad::Var adapted = adapt(out.global_feature, adapter_);
        out.score = global_score(adapted, out.text, out.final_map, cfg_.scoring_config());
        return out;
    }

    // Ranked anomaly descriptions for an encoded image (interpretability
    // output; uses the adapted global feature against per-phrase features).
    std::vector<RankedDescription> rank_for_sample(const EncodedSample& enc) const {
        std::optional<ad::Var> meta_bias;
        ad::Var g = ad::Var::constant(enc.features.global_feature);
        if (cfg_.prompts.conditional) meta_bias = meta_.bias(g);
        auto phrase_feats = per_phrase_features(registry_, enc.class_name, enc.position, ctx_,
                                                *text_encoder_, meta_bias);
        std::vector<std::pair<std::string, Tensor>> plain;
        plain.reserve(phrase_feats.size());
        for (auto& [phrase, var] : phrase_feats) plain.emplace_back(phrase, var.val());
        return rank_descriptions(adapt(g, adapter_).val(), plain);
    }

private:
    RunConfig cfg_;
    DescriptionRegistry registry_;
    std::unique_ptr<ImageEncoder> image_encoder_;
    std::unique_ptr<TextEncoder> text_encoder_;
    std::unique_ptr<Detector> detector_;
    ContextVectors ctx_;
    MetaNet meta_;
    std::vector<StageHead> heads_;
    AdapterParams adapter_;
};

// Ground truth resized to the evaluation resolution (nearest neighbor keeps
// the mask binary).
inline std::optional<Tensor> mask_at_resolution(const std::optional<Tensor>& mask, int res) {
    if (!mask) return std::nullopt;
    if (mask->dim(0) == res && mask->dim(1) == res) return mask;
    return img::resize_mask_nearest(*mask, res, res);
}

} // namespace filo
