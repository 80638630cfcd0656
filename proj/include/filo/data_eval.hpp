#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "filo/core/error.hpp"
#include "filo/core/image.hpp"
#include "filo/core/rng.hpp"
#include "filo/core/tensor.hpp"
#include "filo/scoring.hpp"

// Dataset ingestion (MVTec/VisA-style trees plus the synthetic generator),
// preprocessing, and AUROC metrics.
namespace filo {

struct Sample {
    std::string id;
    std::string class_name;
    std::string split; // "train" or "test"
    int label = 0;     // 0 normal, 1 abnormal
    Image image;
    std::optional<Tensor> mask; // [H,W] binary, image resolution
};

enum class DatasetLayout { mvtec, visa, synthetic };

inline DatasetLayout layout_from_string(const std::string& s) {
    if (s == "mvtec") return DatasetLayout::mvtec;
    if (s == "visa") return DatasetLayout::visa;
    if (s == "synthetic") return DatasetLayout::synthetic;
    fail(ErrorKind::config, "unknown dataset layout: " + s);
}

struct LoadResult {
    std::vector<Sample> samples;
    std::vector<std::string> warnings;
};

// --- synthetic generator -------------------------------------------------

// Textured backgrounds with planted blob/scratch anomalies and exact masks:
// the desk-scale ground truth for end-to-end tests.
struct SyntheticConfig {
    int n_train = 8;
    int n_test = 16;
    int resolution = 64;
    std::vector<std::string> classes = {"weave", "speckle"};

    void validate() const {
        require(n_train > 0 && n_test > 0, ErrorKind::config, "synthetic counts must be positive");
        require(resolution >= 16, ErrorKind::config, "synthetic resolution too small");
        require(!classes.empty(), ErrorKind::config, "synthetic classes list is empty");
    }
};

namespace synth {

inline Image background(const std::string& class_name, int res, rng::Rng& r) {
    Image im(res, res);
    const bool weave = rng::fnv1a64(class_name) % 2 == 0;
    const double fx = r.uniform(3.0, 6.0), fy = r.uniform(3.0, 6.0);
    const double phx = r.uniform(0.0, 6.28), phy = r.uniform(0.0, 6.28);
    std::array<double, 3> base;
    for (int c = 0; c < 3; ++c) base[static_cast<std::size_t>(c)] = 0.45 + 0.1 * r.uniform();
    const double slope = r.uniform(-0.05, 0.05);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            double t;
            if (weave) {
                t = 0.08 * std::sin(2 * 3.14159265 * fx * x / res + phx) *
                        std::sin(2 * 3.14159265 * fy * y / res + phy) +
                    r.uniform(-0.02, 0.02);
            } else {
                t = r.uniform(-0.05, 0.05) + slope * (x + y) / (2.0 * res);
            }
            for (int c = 0; c < 3; ++c)
                im.at(y, x, c) = static_cast<float>(
                    std::clamp(base[static_cast<std::size_t>(c)] + t, 0.0, 1.0));
        }
    return im;
}

// Plants an elliptical blob; returns the exact mask.
inline Tensor plant_blob(Image& im, rng::Rng& r) {
    const int res = im.height;
    Tensor mask(std::vector<int>{res, res});
    const double cx = r.uniform(0.18, 0.82) * res;
    const double cy = r.uniform(0.18, 0.82) * res;
    const double rx = r.uniform(0.07, 0.16) * res;
    const double ry = r.uniform(0.07, 0.16) * res;
    const double shift = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.28, 0.42);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const double dx = (x - cx) / rx, dy = (y - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) {
                mask.at2(y, x) = 1.0;
                const double jitter = r.uniform(-0.04, 0.04);
                for (int c = 0; c < 3; ++c)
                    im.at(y, x, c) = static_cast<float>(
                        std::clamp(im.at(y, x, c) + shift + jitter, 0.0, 1.0));
            }
        }
    return mask;
}

// Plants a thick scratch segment; returns the exact mask.
inline Tensor plant_scratch(Image& im, rng::Rng& r) {
    const int res = im.height;
    Tensor mask(std::vector<int>{res, res});
    const double x0 = r.uniform(0.2, 0.8) * res, y0 = r.uniform(0.2, 0.8) * res;
    const double angle = r.uniform(0.0, 3.14159265);
    const double len = r.uniform(0.25, 0.5) * res;
    const double half_w = r.uniform(1.0, 2.0);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double shift = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.3, 0.45);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            // Distance from pixel center to the segment.
            const double px = x - x0, py = y - y0;
            const double t = std::clamp(px * dx + py * dy, 0.0, len);
            const double ddx = px - t * dx, ddy = py - t * dy;
            if (ddx * ddx + ddy * ddy <= half_w * half_w) {
                mask.at2(y, x) = 1.0;
                for (int c = 0; c < 3; ++c)
                    im.at(y, x, c) = static_cast<float>(
                        std::clamp(im.at(y, x, c) + shift, 0.0, 1.0));
            }
        }
    return mask;
}

} // namespace synth

// Deterministic synthetic dataset: balanced labels per class, abnormal
// samples alternate blob and scratch anomalies and always carry exact masks.
inline std::vector<Sample> generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::vector<Sample> samples;
    auto make_split = [&](const std::string& split, int count) {
        for (int i = 0; i < count; ++i) {
            const std::string& cls =
                cfg.classes[static_cast<std::size_t>(i) % cfg.classes.size()];
            // Balanced labels within each class: with classes assigned round
            // robin, alternating per class index keeps both labels present.
            const int per_class_idx = i / static_cast<int>(cfg.classes.size());
            const int label = per_class_idx % 2;
            rng::Rng r(rng::substream(seed, "synthetic/" + split + "/" + std::to_string(i)));
            Sample s;
            s.class_name = cls;
            s.split = split;
            s.label = label;
            s.image = synth::background(cls, cfg.resolution, r);
            if (label == 1) {
                Tensor mask = (per_class_idx / 2) % 2 == 0 ? synth::plant_blob(s.image, r)
                                                           : synth::plant_scratch(s.image, r);
                // Degenerate masks cannot happen (shapes are clipped to the
                // frame), but keep the guarantee explicit.
                require(mask.sum() > 0.0, ErrorKind::internal, "empty synthetic mask");
                s.mask = std::move(mask);
            } else {
                s.mask = Tensor(std::vector<int>{cfg.resolution, cfg.resolution}, 0.0);
            }
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%03d_%s", i, label ? "bad" : "good");
            s.id = "synthetic/" + cls + "/" + split + "/" + buf;
            samples.push_back(std::move(s));
        }
    };
    make_split("train", cfg.n_train);
    make_split("test", cfg.n_test);
    return samples;
}

// --- directory loaders ----------------------------------------------------

namespace detail {

inline std::vector<std::filesystem::path> sorted_images(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::is_directory(dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        if (img::readable_image_ext(e.path().extension().string())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<std::string> sorted_subdirs(const std::filesystem::path& dir) {
    std::vector<std::string> out;
    if (!std::filesystem::is_directory(dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::optional<std::filesystem::path> find_mask(const std::filesystem::path& dir,
                                                      const std::string& stem,
                                                      bool mvtec_suffix) {
    static const char* exts[] = {".png", ".ppm", ".pgm", ".pnm"};
    for (const char* ext : exts) {
        std::filesystem::path p =
            dir / ((mvtec_suffix ? stem + "_mask" : stem) + ext);
        if (std::filesystem::exists(p) && img::readable_image_ext(ext)) return p;
    }
    // Either naming convention is accepted in both layouts.
    for (const char* ext : exts) {
        std::filesystem::path p = dir / ((mvtec_suffix ? stem : stem + "_mask") + ext);
        if (std::filesystem::exists(p) && img::readable_image_ext(ext)) return p;
    }
    return std::nullopt;
}

// Shared walker for the MVTec tree (test/<defect>) and the organized VisA
// tree (test/{good,bad}); the two differ only in defect-directory naming and
// mask file suffixes.
inline LoadResult load_tree(const std::string& root, bool mvtec_masks,
                            const std::string& split) {
    namespace fs = std::filesystem;
    require(fs::is_directory(root), ErrorKind::io, "dataset root not found: " + root);
    LoadResult result;
    const std::vector<std::string> classes = sorted_subdirs(root);
    if (classes.empty()) result.warnings.push_back("dataset root has no class directories: " + root);
    for (const std::string& cls : classes) {
        const fs::path class_dir = fs::path(root) / cls;
        std::vector<std::string> splits;
        if (split == "all" || split == "train") splits.push_back("train");
        if (split == "all" || split == "test") splits.push_back("test");
        for (const std::string& sp : splits) {
            for (const std::string& defect : sorted_subdirs(class_dir / sp)) {
                const bool good = defect == "good";
                for (const auto& path : sorted_images(class_dir / sp / defect)) {
                    Sample s;
                    s.id = fs::relative(path, root).string();
                    s.class_name = cls;
                    s.split = sp;
                    s.label = good ? 0 : 1;
                    s.image = img::read_image(path.string());
                    if (good) {
                        s.mask = Tensor(std::vector<int>{s.image.height, s.image.width}, 0.0);
                    } else if (sp == "test") {
                        auto mask_path = find_mask(class_dir / "ground_truth" / defect,
                                                   path.stem().string(), mvtec_masks);
                        if (mask_path) {
                            s.mask = img::mask_from_image(img::read_image(mask_path->string()));
                        } else {
                            result.warnings.push_back(
                                "missing ground-truth mask for " + s.id +
                                "; sample excluded from the pixel metric");
                        }
                    }
                    result.samples.push_back(std::move(s));
                }
            }
        }
    }
    std::sort(result.samples.begin(), result.samples.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    if (result.samples.empty())
        result.warnings.push_back("no samples found under " + root);
    return result;
}

} // namespace detail

// Loads a dataset with deterministic (lexicographic) ordering. `split` is
// "train", "test", or "all". The synthetic layout ignores `root` and
// generates from the given config.
inline LoadResult load_dataset(const std::string& root, DatasetLayout layout,
                               const std::string& split = "all",
                               const SyntheticConfig& synth_cfg = {},
                               std::uint64_t seed = 0) {
    require(split == "train" || split == "test" || split == "all", ErrorKind::config,
            "split must be train/test/all");
    switch (layout) {
        case DatasetLayout::mvtec:
            return detail::load_tree(root, /*mvtec_masks=*/true, split);
        case DatasetLayout::visa:
            return detail::load_tree(root, /*mvtec_masks=*/false, split);
        case DatasetLayout::synthetic: {
            LoadResult r;
            for (auto& s : generate_synthetic(synth_cfg, seed)) {
                if (split == "all" || s.split == split) r.samples.push_back(std::move(s));
            }
            return r;
        }
    }
    fail(ErrorKind::internal, "unreachable layout");
}

// Writes samples to disk in the MVTec tree convention (images as PPM, masks
// as PGM), so generated datasets can be reloaded through the directory path.
inline void write_dataset_tree(const std::vector<Sample>& samples, const std::string& root) {
    namespace fs = std::filesystem;
    for (const auto& s : samples) {
        const std::string defect = s.label ? "defect" : "good";
        const fs::path dir = fs::path(root) / s.class_name / s.split / defect;
        fs::create_directories(dir);
        const std::string stem = fs::path(s.id).filename().string();
        img::write_ppm(s.image, (dir / (stem + ".ppm")).string());
        if (s.label && s.mask) {
            const fs::path mask_dir = fs::path(root) / s.class_name / "ground_truth" / defect;
            fs::create_directories(mask_dir);
            img::write_pgm(*s.mask, (mask_dir / (stem + "_mask.pgm")).string());
        }
    }
}

// --- preprocessing --------------------------------------------------------

struct PreprocessConfig {
    int resolution = 518;
    std::array<double, 3> channel_mean = {0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> channel_std = {0.26862954, 0.26130258, 0.27577711};
};

struct Preprocessed {
    Image resized;     // [res, res] pixels in [0,1], detector input
    Tensor normalized; // [res, res, 3], encoder input
};

inline Preprocessed preprocess(const Image& image, const PreprocessConfig& cfg) {
    require(!image.empty(), ErrorKind::shape, "preprocess: empty image");
    Preprocessed out;
    out.resized = img::resize_bilinear(image, cfg.resolution, cfg.resolution);
    out.normalized = Tensor(std::vector<int>{cfg.resolution, cfg.resolution, 3});
    for (int y = 0; y < cfg.resolution; ++y)
        for (int x = 0; x < cfg.resolution; ++x)
            for (int c = 0; c < 3; ++c)
                out.normalized.at3(y, x, c) =
                    (static_cast<double>(out.resized.at(y, x, c)) -
                     cfg.channel_mean[static_cast<std::size_t>(c)]) /
                    cfg.channel_std[static_cast<std::size_t>(c)];
    return out;
}

// --- metrics ----------------------------------------------------------------

// AUROC with half-credit ties, computed from average ranks; equals the
// pairwise probability P(score_pos > score_neg) + 0.5 P(tie) exactly.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size(), ErrorKind::shape,
            "auroc: scores/labels length mismatch");
    std::int64_t n_pos = 0, n_neg = 0;
    for (int l : labels) {
        require(l == 0 || l == 1, ErrorKind::data, "auroc labels must be 0/1");
        (l == 1 ? n_pos : n_neg)++;
    }
    require(n_pos > 0 && n_neg > 0, ErrorKind::metric,
            "auroc is undefined with a single class");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct EvalRecord {
    std::string image_id;
    std::string class_name;
    int label = 0;
    ImageScore score;
    Tensor final_map;           // [H, W] at evaluation resolution
    std::optional<Tensor> mask; // [H, W] binary, same resolution
    std::vector<RankedDescription> top_descriptions;
};

// Pixel-level AUROC over pixels pooled across all given records. Records
// without masks are skipped (the loader has already warned about them).
inline double pixel_auroc(const std::vector<EvalRecord>& records) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : records) {
        if (!r.mask) continue;
        require(r.mask->same_shape(r.final_map), ErrorKind::shape,
                "pixel_auroc: mask/map shape mismatch for " + r.image_id);
        for (std::int64_t i = 0; i < r.final_map.size(); ++i) {
            scores.push_back(r.final_map[i]);
            labels.push_back((*r.mask)[i] > 0.5 ? 1 : 0);
        }
    }
    require(!scores.empty(), ErrorKind::metric, "pixel_auroc: no masked records");
    return auroc(scores, labels);
}

// Per-image pixel AUROC, averaged; available behind a flag for comparison
// with the pooled convention.
inline double pixel_auroc_per_image(const std::vector<EvalRecord>& records) {
    double total = 0.0;
    int counted = 0;
    for (const auto& r : records) {
        if (!r.mask) continue;
        bool has_pos = false, has_neg = false;
        for (std::int64_t i = 0; i < r.mask->size(); ++i)
            ((*r.mask)[i] > 0.5 ? has_pos : has_neg) = true;
        if (!has_pos || !has_neg) continue;
        std::vector<double> scores(static_cast<std::size_t>(r.final_map.size()));
        std::vector<int> labels(scores.size());
        for (std::int64_t i = 0; i < r.final_map.size(); ++i) {
            scores[static_cast<std::size_t>(i)] = r.final_map[i];
            labels[static_cast<std::size_t>(i)] = (*r.mask)[i] > 0.5 ? 1 : 0;
        }
        total += auroc(scores, labels);
        ++counted;
    }
    require(counted > 0, ErrorKind::metric, "pixel_auroc_per_image: no usable records");
    return total / counted;
}

} // namespace filo
