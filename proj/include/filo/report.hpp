#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "filo/core/image.hpp"
#include "filo/core/tensor_io.hpp"
#include "filo/data_eval.hpp"
#include "filo/pipeline.hpp"

// Evaluation driver plus report rendering: per-class and mean AUROC tables,
// machine-readable records, anomaly-map dumps, and score histograms.
namespace filo {

struct EvalOptions {
    bool per_image_pixel_auroc = false;
    int top_k = 5;
    bool with_descriptions = true;
    std::string dump_maps_dir; // empty = no dumps
};

// Runs the model over samples and collects evaluation records.
inline std::vector<EvalRecord> run_eval(FiloModel& model, const std::vector<Sample>& samples,
                                        const EvalOptions& opts = {}) {
    std::vector<EvalRecord> records;
    const PreprocessConfig pp = model.cfg().preprocess_config();
    for (const Sample& s : samples) {
        Preprocessed pre = preprocess(s.image, pp);
        const auto enc = model.encode_sample(pre.resized, pre.normalized, s.id, s.class_name);
        const ForwardOutput fwd = model.forward(enc);
        EvalRecord r;
        r.image_id = s.id;
        r.class_name = s.class_name;
        r.label = s.label;
        r.score = fwd.score.value();
        r.final_map = fwd.final_map.val();
        r.mask = mask_at_resolution(s.mask, pp.resolution);
        if (opts.with_descriptions) {
            auto ranked = model.rank_for_sample(enc);
            if (static_cast<int>(ranked.size()) > opts.top_k)
                ranked.resize(static_cast<std::size_t>(opts.top_k));
            r.top_descriptions = std::move(ranked);
        }
        records.push_back(std::move(r));
    }
    if (!opts.dump_maps_dir.empty()) {
        std::filesystem::create_directories(opts.dump_maps_dir);
        for (const auto& r : records) {
            std::string stem = r.image_id;
            std::replace(stem.begin(), stem.end(), '/', '_');
            std::replace(stem.begin(), stem.end(), '\\', '_');
            const std::string base = opts.dump_maps_dir + "/" + stem;
            img::write_pgm(r.final_map, base + ".pgm");
            tio::save_tensors(base + ".filotensors", {{"map", &r.final_map}}, tio::Dtype::f32);
        }
    }
    return records;
}

struct ClassMetrics {
    std::string class_name;
    int n_images = 0;
    std::optional<double> image_auroc;
    std::optional<double> pixel_auroc;
};

struct EvalReport {
    std::vector<ClassMetrics> classes;
    ClassMetrics mean; // macro average over defined per-class values
    std::vector<std::string> warnings;
};

inline EvalReport build_report(const std::vector<EvalRecord>& records,
                               bool per_image_pixel = false) {
    std::map<std::string, std::vector<const EvalRecord*>> by_class;
    for (const auto& r : records) by_class[r.class_name].push_back(&r);

    EvalReport report;
    double image_sum = 0.0, pixel_sum = 0.0;
    int image_n = 0, pixel_n = 0;
    for (const auto& [cls, rs] : by_class) {
        ClassMetrics m;
        m.class_name = cls;
        m.n_images = static_cast<int>(rs.size());
        std::vector<double> scores;
        std::vector<int> labels;
        std::vector<EvalRecord> masked;
        for (const EvalRecord* r : rs) {
            scores.push_back(r->score.s_global);
            labels.push_back(r->label);
            if (r->mask) masked.push_back(*r);
        }
        try {
            m.image_auroc = auroc(scores, labels);
            image_sum += *m.image_auroc;
            ++image_n;
        } catch (const Error&) {
            report.warnings.push_back("image AUROC undefined for class " + cls +
                                      " (single-class scores)");
        }
        try {
            m.pixel_auroc = per_image_pixel ? pixel_auroc_per_image(masked)
                                            : pixel_auroc(masked);
            pixel_sum += *m.pixel_auroc;
            ++pixel_n;
        } catch (const Error&) {
            report.warnings.push_back("pixel AUROC undefined for class " + cls);
        }
        report.classes.push_back(std::move(m));
    }
    report.mean.class_name = "mean";
    report.mean.n_images = static_cast<int>(records.size());
    if (image_n > 0) report.mean.image_auroc = image_sum / image_n;
    if (pixel_n > 0) report.mean.pixel_auroc = pixel_sum / pixel_n;
    return report;
}

namespace report_fmt {

inline std::string cell(const std::optional<double>& v) {
    if (!v) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << (*v * 100.0);
    return os.str();
}

} // namespace report_fmt

// Human table: one row per class plus the mean row, AUROC in percent.
inline std::string render_table(const EvalReport& report) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "class" << std::right << std::setw(8) << "images"
       << std::setw(12) << "image-AUC" << std::setw(12) << "pixel-AUC" << '\n';
    os << std::string(48, '-') << '\n';
    for (const auto& m : report.classes)
        os << std::left << std::setw(16) << m.class_name << std::right << std::setw(8)
           << m.n_images << std::setw(12) << report_fmt::cell(m.image_auroc) << std::setw(12)
           << report_fmt::cell(m.pixel_auroc) << '\n';
    os << std::string(48, '-') << '\n';
    os << std::left << std::setw(16) << report.mean.class_name << std::right << std::setw(8)
       << report.mean.n_images << std::setw(12) << report_fmt::cell(report.mean.image_auroc)
       << std::setw(12) << report_fmt::cell(report.mean.pixel_auroc) << '\n';
    return os.str();
}

inline nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["classes"] = nlohmann::json::array();
    auto row = [](const ClassMetrics& m) {
        nlohmann::json r;
        r["class"] = m.class_name;
        r["n_images"] = m.n_images;
        r["image_auroc"] = m.image_auroc ? nlohmann::json(*m.image_auroc) : nlohmann::json();
        r["pixel_auroc"] = m.pixel_auroc ? nlohmann::json(*m.pixel_auroc) : nlohmann::json();
        return r;
    };
    for (const auto& m : report.classes) j["classes"].push_back(row(m));
    j["mean"] = row(report.mean);
    j["warnings"] = report.warnings;
    return j;
}

// One score record per image: {image_id, s_global, text_term, map_term,
// top_k_descriptions}, emitted as JSON lines.
inline nlohmann::json score_record(const EvalRecord& r) {
    nlohmann::json j;
    j["image_id"] = r.image_id;
    j["class"] = r.class_name;
    j["label"] = r.label;
    j["s_global"] = r.score.s_global;
    j["s_display"] = r.score.display();
    j["text_term"] = r.score.text_term;
    j["map_term"] = r.score.map_term;
    j["top_k_descriptions"] = nlohmann::json::array();
    for (const auto& d : r.top_descriptions)
        j["top_k_descriptions"].push_back({{"phrase", d.phrase}, {"similarity", d.similarity}});
    return j;
}

inline void write_score_records(const std::vector<EvalRecord>& records,
                                const std::string& path) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    for (const auto& r : records) out << score_record(r).dump() << '\n';
}

// --- score histograms -------------------------------------------------------

// Renders per-class histograms of s_global for normal vs abnormal samples to
// simple bar-chart images (normal bars in the lower half color, abnormal in
// the upper), one file per class.
inline void render_score_histogram(const std::vector<const EvalRecord*>& records,
                                   const std::string& path, int bins = 20) {
    const int width = 420, height = 300, margin = 30;
    Image im(height, width, 1.0f);
    std::vector<int> normal(static_cast<std::size_t>(bins), 0);
    std::vector<int> abnormal(static_cast<std::size_t>(bins), 0);
    for (const EvalRecord* r : records) {
        int b = static_cast<int>(r->score.s_global / 2.0 * bins);
        b = std::clamp(b, 0, bins - 1);
        (r->label ? abnormal : normal)[static_cast<std::size_t>(b)]++;
    }
    int peak = 1;
    for (int b = 0; b < bins; ++b)
        peak = std::max({peak, normal[static_cast<std::size_t>(b)],
                         abnormal[static_cast<std::size_t>(b)]});
    const int plot_w = width - 2 * margin, plot_h = height - 2 * margin;
    const int bar_w = plot_w / bins;
    auto draw_bar = [&](int b, int count, bool is_abnormal) {
        if (count == 0) return;
        const int bh = std::max(1, count * plot_h / peak);
        const int x0 = margin + b * bar_w + (is_abnormal ? bar_w / 2 : 0);
        const int x1 = x0 + bar_w / 2 - 1;
        for (int y = height - margin - bh; y < height - margin; ++y)
            for (int x = x0; x <= x1 && x < width - margin; ++x) {
                im.at(y, x, 0) = is_abnormal ? 0.85f : 0.15f;
                im.at(y, x, 1) = 0.25f;
                im.at(y, x, 2) = is_abnormal ? 0.15f : 0.85f;
            }
    };
    for (int b = 0; b < bins; ++b) {
        draw_bar(b, normal[static_cast<std::size_t>(b)], false);
        draw_bar(b, abnormal[static_cast<std::size_t>(b)], true);
    }
    // Axes.
    for (int x = margin; x < width - margin; ++x)
        for (int c = 0; c < 3; ++c) im.at(height - margin, x, c) = 0.0f;
    for (int y = margin; y <= height - margin; ++y)
        for (int c = 0; c < 3; ++c) im.at(y, margin, c) = 0.0f;
    img::write_ppm(im, path);
}

inline std::vector<std::string> render_score_histograms(const std::vector<EvalRecord>& records,
                                                        const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::map<std::string, std::vector<const EvalRecord*>> by_class;
    for (const auto& r : records) by_class[r.class_name].push_back(&r);
    std::vector<std::string> files;
    for (const auto& [cls, rs] : by_class) {
        const std::string path = out_dir + "/scores_" + cls + ".ppm";
        render_score_histogram(rs, path);
        files.push_back(path);
    }
    return files;
}

} // namespace filo
