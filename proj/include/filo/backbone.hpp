#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/rng.hpp"
#include "filo/core/tensor.hpp"
#include "filo/core/tensor_io.hpp"
#include "filo/prompts.hpp"

// Dual-encoder feature contract: a global image feature plus per-stage patch
// grids on both attention paths, and a deterministic stub implementation
// with enough signal for end-to-end synthetic training.
namespace filo {

struct BackboneConfig {
    int input_resolution = 518;
    int patch_size = 14;
    std::vector<int> stage_indices = {6, 12, 18, 24};
    int feature_width = 768;
    int vv_start_layer = 7;
    std::uint64_t seed = 0;

    int grid() const { return input_resolution / patch_size; }
    int stage_count() const { return static_cast<int>(stage_indices.size()); }

    void validate() const {
        require(input_resolution > 0 && patch_size > 0, ErrorKind::config,
                "resolution and patch size must be positive");
        require(input_resolution % patch_size == 0, ErrorKind::config,
                "input resolution must be divisible by the patch size");
        require(!stage_indices.empty(), ErrorKind::config, "no backbone stages configured");
        for (std::size_t i = 1; i < stage_indices.size(); ++i)
            require(stage_indices[i] > stage_indices[i - 1], ErrorKind::config,
                    "stage indices must be strictly increasing");
        require(feature_width > 0, ErrorKind::config, "feature width must be positive");
    }
};

// Patch features for one stage on both attention paths, [H_i, W_i, C] each.
struct StagePatchFeatures {
    Tensor qkv_patches;
    Tensor vv_patches;
    int stage_index = 0;
};

struct ImageFeatures {
    Tensor global_feature; // [C]
    std::vector<StagePatchFeatures> stages;

    void validate(const BackboneConfig& cfg) const {
        require(static_cast<int>(stages.size()) == cfg.stage_count(), ErrorKind::shape,
                "stage count mismatch");
        require(global_feature.ndim() == 1 && global_feature.dim(0) == cfg.feature_width,
                ErrorKind::shape, "global feature width mismatch");
        for (const auto& s : stages) {
            require(s.qkv_patches.same_shape(s.vv_patches), ErrorKind::shape,
                    "qkv/vv grids must share shape");
            require(s.qkv_patches.ndim() == 3 && s.qkv_patches.dim(2) == cfg.feature_width,
                    ErrorKind::shape, "patch grid width mismatch");
            require(s.qkv_patches.all_finite() && s.vv_patches.all_finite(),
                    ErrorKind::shape, "patch features must be finite");
        }
    }
};

// Image-encoder contract. `image` is the preprocessed [H, W, 3] tensor at
// config resolution; `image_id` lets file-backed implementations locate
// externally produced features.
class ImageEncoder {
public:
    virtual ~ImageEncoder() = default;
    virtual const BackboneConfig& config() const = 0;
    virtual ImageFeatures encode_image(const Tensor& image,
                                       const std::string& image_id = {}) const = 0;
};

namespace stub {

// Per-patch local statistics, the raw material the stub projects into
// feature space. Order: per-channel mean, per-channel stddev, per-channel
// mean |dx|, per-channel mean |dy|, luminance min, luminance max.
constexpr int kStatCount = 14;

inline void patch_stats(const Tensor& image, int y0, int x0, int ph, int pw,
                        double* out) {
    const int h = image.dim(0), w = image.dim(1);
    const int y1 = std::min(h, y0 + ph), x1 = std::min(w, x0 + pw);
    const double n = static_cast<double>((y1 - y0) * (x1 - x0));
    double mean[3] = {0, 0, 0}, var[3] = {0, 0, 0}, gx[3] = {0, 0, 0}, gy[3] = {0, 0, 0};
    double lmin = 1e30, lmax = -1e30;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            double lum = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double v = image.at3(y, x, c);
                mean[c] += v;
                lum += v;
                if (x + 1 < x1) gx[c] += std::abs(image.at3(y, x + 1, c) - v);
                if (y + 1 < y1) gy[c] += std::abs(image.at3(y + 1, x, c) - v);
            }
            lum /= 3.0;
            lmin = std::min(lmin, lum);
            lmax = std::max(lmax, lum);
        }
    for (int c = 0; c < 3; ++c) mean[c] /= n;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c) {
                const double d = image.at3(y, x, c) - mean[c];
                var[c] += d * d;
            }
    int k = 0;
    for (int c = 0; c < 3; ++c) out[k++] = mean[c];
    for (int c = 0; c < 3; ++c) out[k++] = std::sqrt(var[c] / n);
    for (int c = 0; c < 3; ++c) out[k++] = gx[c] / n;
    for (int c = 0; c < 3; ++c) out[k++] = gy[c] / n;
    out[k++] = lmin;
    out[k++] = lmax;
}

} // namespace stub

// Deterministic stub backbone. Patch features are a smooth seeded projection
// of local pixel statistics, pooled over a stage-dependent neighborhood so
// deeper stages see a wider context; the V-V path applies a fixed seeded
// mixing matrix from `vv_start_layer` on. Frozen by construction: encoding
// never mutates state, and identical inputs give bit-identical outputs.
class StubBackbone : public ImageEncoder {
public:
    explicit StubBackbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int c = cfg_.feature_width;
        for (int s = 0; s < cfg_.stage_count(); ++s) {
            rng::Rng proj(rng::substream(cfg_.seed, "backbone/proj/" + std::to_string(s)));
            stage_proj_.push_back(
                Tensor::gaussian({c, stub::kStatCount}, proj, 1.0 / std::sqrt(stub::kStatCount)));
            stage_bias_.push_back(Tensor::gaussian({c}, proj, 0.1));
            rng::Rng mixr(rng::substream(cfg_.seed, "backbone/vvmix/" + std::to_string(s)));
            vv_mix_.push_back(Tensor::gaussian({c, c}, mixr, 1.0 / std::sqrt(c)));
        }
        rng::Rng gr(rng::substream(cfg_.seed, "backbone/global"));
        global_proj_ = Tensor::gaussian({c, stub::kStatCount}, gr, 1.0 / std::sqrt(stub::kStatCount));
        global_bias_ = Tensor::gaussian({c}, gr, 0.1);
    }

    const BackboneConfig& config() const override { return cfg_; }

    ImageFeatures encode_image(const Tensor& image, const std::string& = {}) const override {
        require(image.ndim() == 3 && image.dim(0) == cfg_.input_resolution &&
                    image.dim(1) == cfg_.input_resolution && image.dim(2) == 3,
                ErrorKind::shape,
                "encode_image expects a [" + std::to_string(cfg_.input_resolution) + "," +
                    std::to_string(cfg_.input_resolution) + ",3] image, got " + image.shape_str());

        const int g = cfg_.grid();
        const int c = cfg_.feature_width;

        // Raw per-patch statistics.
        Tensor stats(std::vector<int>{g, g, stub::kStatCount});
        for (int py = 0; py < g; ++py)
            for (int px = 0; px < g; ++px)
                stub::patch_stats(image, py * cfg_.patch_size, px * cfg_.patch_size,
                                  cfg_.patch_size, cfg_.patch_size,
                                  &stats.v[static_cast<std::size_t>(stats.idx3(py, px, 0))]);

        ImageFeatures feats;
        for (int s = 0; s < cfg_.stage_count(); ++s) {
            // Deeper stages pool statistics over a wider patch neighborhood.
            const int radius = s;
            Tensor pooled = pool_stats(stats, radius);
            StagePatchFeatures stage;
            stage.stage_index = cfg_.stage_indices[static_cast<std::size_t>(s)];
            stage.qkv_patches = project(pooled, stage_proj_[static_cast<std::size_t>(s)],
                                        stage_bias_[static_cast<std::size_t>(s)]);
            if (stage.stage_index >= cfg_.vv_start_layer)
                stage.vv_patches = mix(stage.qkv_patches, vv_mix_[static_cast<std::size_t>(s)]);
            else
                stage.vv_patches = stage.qkv_patches;
            feats.stages.push_back(std::move(stage));
        }

        double gstats[stub::kStatCount];
        stub::patch_stats(image, 0, 0, image.dim(0), image.dim(1), gstats);
        feats.global_feature = Tensor(std::vector<int>{c});
        for (int o = 0; o < c; ++o) {
            double acc = global_bias_[o];
            for (int i = 0; i < stub::kStatCount; ++i)
                acc += global_proj_.at2(o, i) * gstats[i];
            feats.global_feature[o] = std::tanh(acc);
        }
        feats.validate(cfg_);
        return feats;
    }

private:
    static Tensor pool_stats(const Tensor& stats, int radius) {
        if (radius == 0) return stats;
        const int g = stats.dim(0), k = stats.dim(2);
        Tensor out(stats.shape);
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x) {
                const int y0 = std::max(0, y - radius), y1 = std::min(g - 1, y + radius);
                const int x0 = std::max(0, x - radius), x1 = std::min(g - 1, x + radius);
                const double inv = 1.0 / ((y1 - y0 + 1) * (x1 - x0 + 1));
                for (int i = 0; i < k; ++i) {
                    double acc = 0.0;
                    for (int yy = y0; yy <= y1; ++yy)
                        for (int xx = x0; xx <= x1; ++xx) acc += stats.at3(yy, xx, i);
                    out.at3(y, x, i) = acc * inv;
                }
            }
        return out;
    }

    static Tensor project(const Tensor& stats, const Tensor& proj, const Tensor& bias) {
        const int g = stats.dim(0), k = stats.dim(2), c = proj.dim(0);
        Tensor out(std::vector<int>{g, g, c});
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                for (int o = 0; o < c; ++o) {
                    double acc = bias[o];
                    for (int i = 0; i < k; ++i) acc += proj.at2(o, i) * stats.at3(y, x, i);
                    out.at3(y, x, o) = std::tanh(acc);
                }
        return out;
    }

    static Tensor mix(const Tensor& grid, const Tensor& m) {
        const int g = grid.dim(0), c = grid.dim(2);
        Tensor out(grid.shape);
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x) {
                const std::int64_t base = grid.idx3(y, x, 0);
                for (int o = 0; o < c; ++o) {
                    double acc = 0.0;
                    const std::int64_t mbase = m.idx2(o, 0);
                    for (int i = 0; i < c; ++i) acc += m[mbase + i] * grid[base + i];
                    out[base + o] = acc;
                }
            }
        return out;
    }

    BackboneConfig cfg_;
    std::vector<Tensor> stage_proj_;
    std::vector<Tensor> stage_bias_;
    std::vector<Tensor> vv_mix_;
    Tensor global_proj_;
    Tensor global_bias_;
};

// Loads externally produced features from the tensor container (one file per
// image: "<features_dir>/<image stem>.filotensors" with entries "global",
// "stage<i>/qkv", "stage<i>/vv"). Lets a real dual-encoder run out of
// process while this pipeline consumes its features.
class FeatureFileBackbone : public ImageEncoder {
public:
    FeatureFileBackbone(BackboneConfig cfg, std::string features_dir)
        : cfg_(std::move(cfg)), dir_(std::move(features_dir)) {
        cfg_.validate();
        require(std::filesystem::is_directory(dir_), ErrorKind::io,
                "features dir not found: " + dir_);
    }

    const BackboneConfig& config() const override { return cfg_; }

    ImageFeatures encode_image(const Tensor&, const std::string& image_id) const override {
        require(!image_id.empty(), ErrorKind::backend,
                "feature-file backbone needs an image id");
        const std::string stem = std::filesystem::path(image_id).stem().string();
        const std::string path = dir_ + "/" + stem + ".filotensors";
        auto tensors = tio::load_tensors(path);
        ImageFeatures feats;
        auto take = [&](const std::string& name) -> Tensor {
            auto it = tensors.find(name);
            require(it != tensors.end(), ErrorKind::io,
                    "feature file " + path + " is missing tensor '" + name + "'");
            return it->second;
        };
        feats.global_feature = take("global");
        for (int s = 0; s < cfg_.stage_count(); ++s) {
            StagePatchFeatures stage;
            stage.stage_index = cfg_.stage_indices[static_cast<std::size_t>(s)];
            stage.qkv_patches = take("stage" + std::to_string(s) + "/qkv");
            stage.vv_patches = take("stage" + std::to_string(s) + "/vv");
            feats.stages.push_back(std::move(stage));
        }
        feats.validate(cfg_);
        return feats;
    }

private:
    BackboneConfig cfg_;
    std::string dir_;
};

// Deterministic stub text encoder. Word tokens map to fixed seeded
// embeddings; vector tokens (context slots) enter directly, making the
// output differentiable with respect to them. The pooled sequence passes
// through a fixed mixing matrix and tanh, then unit-normalizes.
class StubTextEncoder : public TextEncoder {
public:
    StubTextEncoder(int width, std::uint64_t seed) : width_(width), seed_(seed) {
        rng::Rng r(rng::substream(seed, "text/mix"));
        mix_ = Tensor::gaussian({width, width}, r, 1.0 / std::sqrt(width));
    }

    int width() const override { return width_; }

    ad::Var encode(const std::vector<TextToken>& tokens) const override {
        require(!tokens.empty(), ErrorKind::data, "cannot encode an empty token sequence");
        ad::Var acc;
        for (std::size_t k = 0; k < tokens.size(); ++k) {
            // Mild position dependence so reorderings encode differently.
            const double wk = 1.0 + 0.05 * std::sin(static_cast<double>(k + 1));
            ad::Var term;
            if (tokens[k].is_vec()) {
                require(tokens[k].vec.val().ndim() == 1 &&
                            tokens[k].vec.val().dim(0) == width_,
                        ErrorKind::config, "token vector width mismatch");
                term = ad::mul_const(tokens[k].vec, wk);
            } else {
                term = ad::mul_const(ad::Var::constant(word_embedding(tokens[k].word)), wk);
            }
            acc = acc.defined() ? ad::add(acc, term) : term;
        }
        const ad::Var mixed = ad::tanh(ad::matvec(ad::Var::constant(mix_), acc));
        return ad::l2_normalize(mixed);
    }

private:
    Tensor word_embedding(const std::string& word) const {
        rng::Rng r(rng::mix(rng::substream(seed_, "text/word"), rng::fnv1a64(word)));
        return Tensor::gaussian({width_}, r, 1.0 / std::sqrt(width_));
    }

    int width_;
    std::uint64_t seed_;
    Tensor mix_;
};

} // namespace filo
