#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "filo/backbone.hpp"
#include "filo/core/error.hpp"
#include "filo/core/rng.hpp"
#include "filo/data_eval.hpp"
#include "filo/grounding.hpp"
#include "filo/locmap.hpp"
#include "filo/losses.hpp"
#include "filo/scoring.hpp"

// Run configuration: one nested JSON document binding every module config.
// Unknown keys are rejected; defaults are the reported reference settings.
namespace filo {

struct TrainConfig {
    double lr_ctx = 1e-3;     // learnable text vectors + meta net
    double lr_mmci = 1e-4;    // MMCI kernels + per-stage linear maps
    double lr_adapter = 1e-5; // adapter phase
    int epochs_main = 15;
    int epochs_adapter = 5;
    int batch_size = 1;
    double weight_decay = 0.01; // decoupled
    double global_weight = 1.0;
    double local_weight = 1.0;

    void validate() const {
        require(lr_ctx >= 0 && lr_mmci >= 0 && lr_adapter >= 0, ErrorKind::config,
                "learning rates must be non-negative");
        require(epochs_main >= 0 && epochs_adapter >= 0, ErrorKind::config,
                "epoch counts must be non-negative");
        require(batch_size == 1, ErrorKind::config,
                "batch_size must be 1 (prompt counts vary per class)");
        require(weight_decay >= 0, ErrorKind::config, "weight_decay must be non-negative");
    }
};

struct RunConfig {
    std::uint64_t seed = 0;

    struct Backbone {
        std::string kind = "stub"; // "stub" or "file"
        std::string features_dir;  // for kind == "file"
        int input_resolution = 518;
        int patch_size = 14;
        std::vector<int> stage_indices = {6, 12, 18, 24};
        int feature_width = 768;
        int vv_start_layer = 7;
    } backbone;

    struct Prompts {
        int n_ctx = 12;
        bool conditional = true; // meta-net bias on the context vectors
        double ctx_init_std = 0.02;
        int meta_bottleneck_divisor = 16;
        std::string registry_path = "data/descriptions.json";
    } prompts;

    struct Grounding {
        std::string detector = "stub"; // "stub", "file", or "none"
        std::string boxes_dir;         // for detector == "file"
        double lambda = 0.5;
        double min_confidence = 0.25;
        double stub_z_threshold = 3.5;
        int stub_min_area = 4;
    } grounding;

    struct Locmap {
        std::vector<std::array<int, 2>> kernels = {{1, 1}, {3, 3}, {5, 5},
                                                   {7, 7}, {1, 5}, {5, 1}};
        double sigma = 4.0;
        bool sum_logits = false;
    } locmap;

    struct Scoring {
        double temperature = 100.0;
        int adapter_bottleneck_divisor = 2;
    } scoring;

    struct Losses {
        double gamma = 2.0;
        double eps = 1e-7;
        bool standard_dice = false;
    } losses;

    TrainConfig train;

    struct Data {
        std::string root;
        std::string layout = "synthetic";
        std::array<double, 3> channel_mean = {0.48145466, 0.4578275, 0.40821073};
        std::array<double, 3> channel_std = {0.26862954, 0.26130258, 0.27577711};
        struct Synthetic {
            int n_train = 8;
            int n_test = 16;
            int resolution = 64;
            std::vector<std::string> classes = {"weave", "speckle"};
        } synthetic;
    } data;

    struct Eval {
        bool per_image_pixel_auroc = false;
        int top_k = 5;
    } eval;

    // --- projections onto module configs ---

    BackboneConfig backbone_config() const {
        BackboneConfig b;
        b.input_resolution = backbone.input_resolution;
        b.patch_size = backbone.patch_size;
        b.stage_indices = backbone.stage_indices;
        b.feature_width = backbone.feature_width;
        b.vv_start_layer = backbone.vv_start_layer;
        b.seed = seed;
        return b;
    }

    PreprocessConfig preprocess_config() const {
        PreprocessConfig p;
        p.resolution = backbone.input_resolution;
        p.channel_mean = data.channel_mean;
        p.channel_std = data.channel_std;
        return p;
    }

    SuppressionConfig suppression_config() const {
        SuppressionConfig s;
        s.lambda = grounding.lambda;
        s.min_confidence = grounding.min_confidence;
        return s;
    }

    StubDetector::Params stub_detector_params() const {
        StubDetector::Params p;
        p.z_threshold = grounding.stub_z_threshold;
        p.min_area = grounding.stub_min_area;
        return p;
    }

    std::vector<KernelShape> kernel_shapes() const {
        std::vector<KernelShape> out;
        for (const auto& k : locmap.kernels) out.push_back({k[0], k[1]});
        return out;
    }

    SmoothingConfig smoothing_config() const { return {locmap.sigma}; }
    LocmapOptions locmap_options() const { return {locmap.sum_logits}; }
    ScoringConfig scoring_config() const { return {scoring.temperature}; }

    LossConfig loss_config() const {
        LossConfig l;
        l.gamma = losses.gamma;
        l.eps = losses.eps;
        l.standard_dice = losses.standard_dice;
        return l;
    }

    SyntheticConfig synthetic_config() const {
        SyntheticConfig s;
        s.n_train = data.synthetic.n_train;
        s.n_test = data.synthetic.n_test;
        s.resolution = data.synthetic.resolution;
        s.classes = data.synthetic.classes;
        return s;
    }

    void validate() const {
        backbone_config().validate();
        require(backbone.kind == "stub" || backbone.kind == "file", ErrorKind::config,
                "backbone.kind must be 'stub' or 'file'");
        require(prompts.n_ctx >= 1, ErrorKind::config, "prompts.n_ctx must be >= 1");
        require(prompts.ctx_init_std > 0, ErrorKind::config,
                "prompts.ctx_init_std must be positive");
        require(prompts.meta_bottleneck_divisor >= 1, ErrorKind::config,
                "prompts.meta_bottleneck_divisor must be >= 1");
        require(grounding.detector == "stub" || grounding.detector == "file" ||
                    grounding.detector == "none",
                ErrorKind::config, "grounding.detector must be stub/file/none");
        suppression_config().validate();
        require(!locmap.kernels.empty(), ErrorKind::config, "locmap.kernels is empty");
        for (const auto& k : locmap.kernels)
            require(k[0] >= 1 && k[1] >= 1 && k[0] % 2 == 1 && k[1] % 2 == 1,
                    ErrorKind::config, "kernel dims must be odd and positive");
        smoothing_config().validate();
        scoring_config().validate();
        require(scoring.adapter_bottleneck_divisor >= 1, ErrorKind::config,
                "scoring.adapter_bottleneck_divisor must be >= 1");
        loss_config().validate();
        train.validate();
        layout_from_string(data.layout);
        synthetic_config().validate();
        require(eval.top_k >= 1, ErrorKind::config, "eval.top_k must be >= 1");
    }
};

namespace cfgjson {

using nlohmann::json;

inline json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["backbone"] = {{"kind", c.backbone.kind},
                     {"features_dir", c.backbone.features_dir},
                     {"input_resolution", c.backbone.input_resolution},
                     {"patch_size", c.backbone.patch_size},
                     {"stage_indices", c.backbone.stage_indices},
                     {"feature_width", c.backbone.feature_width},
                     {"vv_start_layer", c.backbone.vv_start_layer}};
    j["prompts"] = {{"n_ctx", c.prompts.n_ctx},
                    {"conditional", c.prompts.conditional},
                    {"ctx_init_std", c.prompts.ctx_init_std},
                    {"meta_bottleneck_divisor", c.prompts.meta_bottleneck_divisor},
                    {"registry_path", c.prompts.registry_path}};
    j["grounding"] = {{"detector", c.grounding.detector},
                      {"boxes_dir", c.grounding.boxes_dir},
                      {"lambda", c.grounding.lambda},
                      {"min_confidence", c.grounding.min_confidence},
                      {"stub_z_threshold", c.grounding.stub_z_threshold},
                      {"stub_min_area", c.grounding.stub_min_area}};
    j["locmap"] = {{"kernels", c.locmap.kernels},
                   {"sigma", c.locmap.sigma},
                   {"sum_logits", c.locmap.sum_logits}};
    j["scoring"] = {{"temperature", c.scoring.temperature},
                    {"adapter_bottleneck_divisor", c.scoring.adapter_bottleneck_divisor}};
    j["losses"] = {{"gamma", c.losses.gamma},
                   {"eps", c.losses.eps},
                   {"standard_dice", c.losses.standard_dice}};
    j["train"] = {{"lr_ctx", c.train.lr_ctx},
                  {"lr_mmci", c.train.lr_mmci},
                  {"lr_adapter", c.train.lr_adapter},
                  {"epochs_main", c.train.epochs_main},
                  {"epochs_adapter", c.train.epochs_adapter},
                  {"batch_size", c.train.batch_size},
                  {"weight_decay", c.train.weight_decay},
                  {"global_weight", c.train.global_weight},
                  {"local_weight", c.train.local_weight}};
    j["data"] = {{"root", c.data.root},
                 {"layout", c.data.layout},
                 {"channel_mean", c.data.channel_mean},
                 {"channel_std", c.data.channel_std},
                 {"synthetic",
                  {{"n_train", c.data.synthetic.n_train},
                   {"n_test", c.data.synthetic.n_test},
                   {"resolution", c.data.synthetic.resolution},
                   {"classes", c.data.synthetic.classes}}}};
    j["eval"] = {{"per_image_pixel_auroc", c.eval.per_image_pixel_auroc},
                 {"top_k", c.eval.top_k}};
    return j;
}

// Every key in `j` must exist in the schema (derived from defaults);
// unknown keys are configuration errors, not silent no-ops.
inline void reject_unknown_keys(const json& j, const json& schema, const std::string& path) {
    if (!j.is_object()) return;
    require(schema.is_object(), ErrorKind::config, "config: '" + path + "' is not a section");
    for (const auto& [key, value] : j.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        require(schema.contains(key), ErrorKind::config, "config: unknown key '" + where + "'");
        if (value.is_object()) reject_unknown_keys(value, schema.at(key), where);
    }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::config, std::string("config: bad value for '") + key + "': " + e.what());
    }
}

inline RunConfig from_json(const json& j) {
    RunConfig c; // defaults
    reject_unknown_keys(j, to_json(c), "");
    get_if(j, "seed", c.seed);
    if (j.contains("backbone")) {
        const json& b = j.at("backbone");
        get_if(b, "kind", c.backbone.kind);
        get_if(b, "features_dir", c.backbone.features_dir);
        get_if(b, "input_resolution", c.backbone.input_resolution);
        get_if(b, "patch_size", c.backbone.patch_size);
        get_if(b, "stage_indices", c.backbone.stage_indices);
        get_if(b, "feature_width", c.backbone.feature_width);
        get_if(b, "vv_start_layer", c.backbone.vv_start_layer);
    }
    if (j.contains("prompts")) {
        const json& p = j.at("prompts");
        get_if(p, "n_ctx", c.prompts.n_ctx);
        get_if(p, "conditional", c.prompts.conditional);
        get_if(p, "ctx_init_std", c.prompts.ctx_init_std);
        get_if(p, "meta_bottleneck_divisor", c.prompts.meta_bottleneck_divisor);
        get_if(p, "registry_path", c.prompts.registry_path);
    }
    if (j.contains("grounding")) {
        const json& g = j.at("grounding");
        get_if(g, "detector", c.grounding.detector);
        get_if(g, "boxes_dir", c.grounding.boxes_dir);
        get_if(g, "lambda", c.grounding.lambda);
        get_if(g, "min_confidence", c.grounding.min_confidence);
        get_if(g, "stub_z_threshold", c.grounding.stub_z_threshold);
        get_if(g, "stub_min_area", c.grounding.stub_min_area);
    }
    if (j.contains("locmap")) {
        const json& l = j.at("locmap");
        get_if(l, "kernels", c.locmap.kernels);
        get_if(l, "sigma", c.locmap.sigma);
        get_if(l, "sum_logits", c.locmap.sum_logits);
    }
    if (j.contains("scoring")) {
        const json& s = j.at("scoring");
        get_if(s, "temperature", c.scoring.temperature);
        get_if(s, "adapter_bottleneck_divisor", c.scoring.adapter_bottleneck_divisor);
    }
    if (j.contains("losses")) {
        const json& l = j.at("losses");
        get_if(l, "gamma", c.losses.gamma);
        get_if(l, "eps", c.losses.eps);
        get_if(l, "standard_dice", c.losses.standard_dice);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        get_if(t, "lr_ctx", c.train.lr_ctx);
        get_if(t, "lr_mmci", c.train.lr_mmci);
        get_if(t, "lr_adapter", c.train.lr_adapter);
        get_if(t, "epochs_main", c.train.epochs_main);
        get_if(t, "epochs_adapter", c.train.epochs_adapter);
        get_if(t, "batch_size", c.train.batch_size);
        get_if(t, "weight_decay", c.train.weight_decay);
        get_if(t, "global_weight", c.train.global_weight);
        get_if(t, "local_weight", c.train.local_weight);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        get_if(d, "root", c.data.root);
        get_if(d, "layout", c.data.layout);
        get_if(d, "channel_mean", c.data.channel_mean);
        get_if(d, "channel_std", c.data.channel_std);
        if (d.contains("synthetic")) {
            const json& s = d.at("synthetic");
            get_if(s, "n_train", c.data.synthetic.n_train);
            get_if(s, "n_test", c.data.synthetic.n_test);
            get_if(s, "resolution", c.data.synthetic.resolution);
            get_if(s, "classes", c.data.synthetic.classes);
        }
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        get_if(e, "per_image_pixel_auroc", c.eval.per_image_pixel_auroc);
        get_if(e, "top_k", c.eval.top_k);
    }
    c.validate();
    return c;
}

} // namespace cfgjson

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, "config parse error in " + path + ": " + e.what());
    }
    return cfgjson::from_json(j);
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    out << cfgjson::to_json(cfg).dump(2) << '\n';
}

// Hash of the canonical config serialization; stored in checkpoints so a
// mismatched config is caught at load time.
inline std::uint64_t config_hash(const RunConfig& cfg) {
    return rng::fnv1a64(cfgjson::to_json(cfg).dump());
}

} // namespace filo
