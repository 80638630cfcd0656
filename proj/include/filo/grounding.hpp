#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/image.hpp"
#include "filo/core/rng.hpp"
#include "filo/prompts.hpp"

// Preliminary localization: detector boxes for anomaly text, suppression of
// anomaly scores outside the boxes, and the derived position phrase.
namespace filo {

// Normalized box in the unit square. Construction clips to [0,1] and rejects
// boxes that are degenerate after clipping.
struct DetectionBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double confidence = 0;
    std::string matched_phrase;

    static std::optional<DetectionBox> make(double x0, double y0, double x1, double y1,
                                            double confidence, std::string phrase) {
        DetectionBox b;
        b.x0 = std::clamp(x0, 0.0, 1.0);
        b.y0 = std::clamp(y0, 0.0, 1.0);
        b.x1 = std::clamp(x1, 0.0, 1.0);
        b.y1 = std::clamp(y1, 0.0, 1.0);
        if (!(b.x0 < b.x1 && b.y0 < b.y1)) return std::nullopt;
        b.confidence = std::clamp(confidence, 0.0, 1.0);
        b.matched_phrase = std::move(phrase);
        return b;
    }

    double center_x() const { return 0.5 * (x0 + x1); }
    double center_y() const { return 0.5 * (y0 + y1); }
    bool contains(double x, double y) const {
        return x >= x0 && x < x1 && y >= y0 && y < y1;
    }
};

struct SuppressionConfig {
    double lambda = 0.5;        // multiplier outside the box union
    double min_confidence = 0.25;

    void validate() const {
        require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::config,
                "suppression lambda must lie in [0,1]");
        require(min_confidence >= 0.0 && min_confidence <= 1.0, ErrorKind::config,
                "min_confidence must lie in [0,1]");
    }
};

// Detector contract: candidate boxes for an image given the anomaly phrases.
// Results may be unfiltered; `detect` applies the confidence gate.
class Detector {
public:
    virtual ~Detector() = default;
    virtual std::vector<DetectionBox> propose(const Image& image,
                                              const std::string& image_id,
                                              const std::vector<std::string>& phrases) const = 0;
};

// Intensity-outlier stub detector: robust z-scores against the global median
// absolute deviation, thresholded and grouped into connected components.
// Deterministic; gives synthetic tests real boxes without an external model.
class StubDetector : public Detector {
public:
    struct Params {
        double z_threshold = 3.5;
        int min_area = 4; // pixels
    };

    StubDetector() = default;
    explicit StubDetector(Params p) : params_(p) {}

    std::vector<DetectionBox> propose(const Image& image, const std::string&,
                                      const std::vector<std::string>& phrases) const override {
        require(!phrases.empty(), ErrorKind::data, "detector needs at least one phrase");
        const int h = image.height, w = image.width;
        std::vector<double> gray(static_cast<std::size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                gray[static_cast<std::size_t>(y) * w + x] = image.gray(y, x);

        std::vector<double> sorted = gray;
        std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
        const double median = sorted[sorted.size() / 2];
        std::vector<double> dev(gray.size());
        for (std::size_t i = 0; i < gray.size(); ++i) dev[i] = std::abs(gray[i] - median);
        std::vector<double> devs = dev;
        std::nth_element(devs.begin(), devs.begin() + devs.size() / 2, devs.end());
        const double mad = devs[devs.size() / 2];
        const double scale = 1.4826 * mad + 1e-6;

        std::vector<char> outlier(gray.size(), 0);
        for (std::size_t i = 0; i < gray.size(); ++i)
            if (dev[i] / scale > params_.z_threshold) outlier[i] = 1;

        // Connected components, 8-connectivity, scan order.
        std::vector<DetectionBox> boxes;
        std::vector<char> seen(gray.size(), 0);
        std::vector<int> stack;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const int start = y * w + x;
                if (!outlier[static_cast<std::size_t>(start)] ||
                    seen[static_cast<std::size_t>(start)])
                    continue;
                int minx = x, maxx = x, miny = y, maxy = y, area = 0;
                double zsum = 0.0;
                stack.assign(1, start);
                seen[static_cast<std::size_t>(start)] = 1;
                while (!stack.empty()) {
                    const int cur = stack.back();
                    stack.pop_back();
                    const int cy = cur / w, cx = cur % w;
                    minx = std::min(minx, cx);
                    maxx = std::max(maxx, cx);
                    miny = std::min(miny, cy);
                    maxy = std::max(maxy, cy);
                    ++area;
                    zsum += dev[static_cast<std::size_t>(cur)] / scale;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int ny = cy + dy, nx = cx + dx;
                            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                            const int ni = ny * w + nx;
                            if (outlier[static_cast<std::size_t>(ni)] &&
                                !seen[static_cast<std::size_t>(ni)]) {
                                seen[static_cast<std::size_t>(ni)] = 1;
                                stack.push_back(ni);
                            }
                        }
                }
                if (area < params_.min_area) continue;
                const double mean_z = zsum / area;
                const double conf = 1.0 - std::exp(-mean_z / 8.0);
                auto box = DetectionBox::make(
                    static_cast<double>(minx) / w, static_cast<double>(miny) / h,
                    static_cast<double>(maxx + 1) / w, static_cast<double>(maxy + 1) / h,
                    conf, nearest_phrase(phrases, mean_z, area, maxx - minx + 1, maxy - miny + 1));
                if (box) boxes.push_back(std::move(*box));
            }
        }
        return boxes;
    }

private:
    // The stub has no text understanding; it matches each box to the phrase
    // whose hashed descriptor is nearest to the box's shape/strength
    // descriptor. Deterministic, and exercises the matched-phrase plumbing.
    static std::string nearest_phrase(const std::vector<std::string>& phrases,
                                      double mean_z, int area, int bw, int bh) {
        const double d[3] = {std::log(1.0 + mean_z), std::log(static_cast<double>(area)),
                             static_cast<double>(bw) / bh};
        std::size_t best = 0;
        double best_sim = -1e300;
        for (std::size_t i = 0; i < phrases.size(); ++i) {
            rng::Rng r(rng::fnv1a64(phrases[i]));
            double sim = 0.0;
            for (double x : d) sim += x * r.gaussian();
            if (sim > best_sim) {
                best_sim = sim;
                best = i;
            }
        }
        return phrases[best];
    }

    Params params_{};
};

// Reads boxes from "<boxes_dir>/<image stem>.boxes.txt": one record per
// line, `x0 y0 x1 y1 confidence phrase...` with normalized coordinates; the
// phrase is the remainder of the line. Lets an out-of-process detector feed
// the pipeline.
class FileDetector : public Detector {
public:
    explicit FileDetector(std::string boxes_dir) : dir_(std::move(boxes_dir)) {
        require(std::filesystem::is_directory(dir_), ErrorKind::io,
                "boxes dir not found: " + dir_);
    }

    std::vector<DetectionBox> propose(const Image&, const std::string& image_id,
                                      const std::vector<std::string>&) const override {
        require(!image_id.empty(), ErrorKind::backend, "file detector needs an image id");
        const std::string stem = std::filesystem::path(image_id).stem().string();
        const std::string path = dir_ + "/" + stem + ".boxes.txt";
        if (!std::filesystem::exists(path)) return {}; // no detections recorded
        return parse_boxes_file(path);
    }

    static std::vector<DetectionBox> parse_boxes_file(const std::string& path) {
        std::ifstream in(path);
        require(in.good(), ErrorKind::io, "cannot open boxes file: " + path);
        std::vector<DetectionBox> boxes;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#') continue;
            std::istringstream is(line);
            double x0, y0, x1, y1, conf;
            if (!(is >> x0 >> y0 >> x1 >> y1 >> conf))
                fail(ErrorKind::io, path + ":" + std::to_string(lineno) + ": bad box record");
            std::string phrase;
            std::getline(is, phrase);
            const std::size_t start = phrase.find_first_not_of(" \t");
            phrase = start == std::string::npos ? std::string() : phrase.substr(start);
            auto box = DetectionBox::make(x0, y0, x1, y1, conf, phrase);
            if (box) boxes.push_back(std::move(*box));
        }
        return boxes;
    }

    static void write_boxes_file(const std::string& path,
                                 const std::vector<DetectionBox>& boxes) {
        std::ofstream out(path);
        require(out.good(), ErrorKind::io, "cannot open for write: " + path);
        for (const auto& b : boxes)
            out << b.x0 << ' ' << b.y0 << ' ' << b.x1 << ' ' << b.y1 << ' '
                << b.confidence << ' ' << b.matched_phrase << '\n';
    }

private:
    std::string dir_;
};

// Runs the detector and applies the confidence gate. An empty result is a
// valid outcome, not an error.
inline std::vector<DetectionBox> detect(const Image& image, const std::string& image_id,
                                        const std::vector<std::string>& anomaly_phrases,
                                        const Detector& detector,
                                        const SuppressionConfig& cfg) {
    cfg.validate();
    require(!anomaly_phrases.empty(), ErrorKind::data, "detect needs anomaly phrases");
    std::vector<DetectionBox> boxes = detector.propose(image, image_id, anomaly_phrases);
    std::erase_if(boxes, [&](const DetectionBox& b) { return b.confidence < cfg.min_confidence; });
    return boxes;
}

// Multiplier mask for box suppression: 1 inside the union of boxes, lambda
// outside. Pixel centers decide membership.
inline Tensor suppression_mask(int h, int w, const std::vector<DetectionBox>& boxes,
                               double lambda) {
    Tensor mask(std::vector<int>{h, w}, lambda);
    for (int y = 0; y < h; ++y) {
        const double cy = (y + 0.5) / h;
        for (int x = 0; x < w; ++x) {
            const double cx = (x + 0.5) / w;
            for (const auto& b : boxes)
                if (b.contains(cx, cy)) {
                    mask.at2(y, x) = 1.0;
                    break;
                }
        }
    }
    return mask;
}

// Suppresses anomaly scores outside all boxes by lambda. With no boxes there
// is no evidence to suppress and the map is returned unchanged.
inline Tensor suppress_outside(const Tensor& map, const std::vector<DetectionBox>& boxes,
                               const SuppressionConfig& cfg) {
    cfg.validate();
    require(map.ndim() == 2, ErrorKind::shape, "suppress_outside expects a [H,W] map");
    if (boxes.empty()) return map;
    const Tensor mask = suppression_mask(map.dim(0), map.dim(1), boxes, cfg.lambda);
    Tensor out(map.shape);
    for (std::int64_t i = 0; i < map.size(); ++i) out[i] = map[i] * mask[i];
    return out;
}

// Differentiable variant used inside the training/inference forward pass.
inline ad::Var suppress_outside(const ad::Var& map, const std::vector<DetectionBox>& boxes,
                                const SuppressionConfig& cfg) {
    cfg.validate();
    require(map.val().ndim() == 2, ErrorKind::shape, "suppress_outside expects a [H,W] map");
    if (boxes.empty()) return map;
    return ad::mul_mask(map, suppression_mask(map.val().dim(0), map.val().dim(1), boxes,
                                              cfg.lambda));
}

// Position phrase for the highest-confidence box center; absent with no
// boxes. Invariant to the order of the box list (confidence ties resolve to
// the earliest by coordinates, then phrase, so permutations cannot change
// the winner).
inline std::optional<std::string> position_phrase(const std::vector<DetectionBox>& boxes) {
    if (boxes.empty()) return std::nullopt;
    const DetectionBox* best = &boxes[0];
    for (const auto& b : boxes) {
        if (b.confidence > best->confidence) {
            best = &b;
        } else if (b.confidence == best->confidence) {
            const auto key = [](const DetectionBox& d) {
                return std::tuple(d.y0, d.x0, d.y1, d.x1, d.matched_phrase);
            };
            if (key(b) < key(*best)) best = &b;
        }
    }
    return PositionVocabulary::phrase_at(best->center_x(), best->center_y());
}

} // namespace filo
