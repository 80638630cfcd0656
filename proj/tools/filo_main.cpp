// filo command-line interface: train, eval, infer, plot, synth.
//
// Exit codes: 0 ok, 1 user error (bad arguments, unreadable inputs, invalid
// config), 2 internal error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "filo/filo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string dataset_root;
    std::string layout;
    std::optional<std::uint64_t> seed;
};

filo::RunConfig load_effective_config(const CommonArgs& args) {
    filo::RunConfig cfg = filo::load_config(args.config_path);
    if (!args.dataset_root.empty()) cfg.data.root = args.dataset_root;
    if (!args.layout.empty()) cfg.data.layout = args.layout;
    if (args.seed) cfg.seed = *args.seed;
    cfg.validate();
    return cfg;
}

filo::FiloModel build_model(const filo::RunConfig& cfg) {
    auto registry = filo::DescriptionRegistry::load(cfg.prompts.registry_path);
    return filo::FiloModel::create(cfg, std::move(registry));
}

filo::LoadResult load_split(const filo::RunConfig& cfg, const std::string& split) {
    return filo::load_dataset(cfg.data.root, filo::layout_from_string(cfg.data.layout), split,
                              cfg.synthetic_config(), cfg.seed);
}

void print_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

int cmd_train(const CommonArgs& common, const std::string& out_dir, const std::string& split) {
    const filo::RunConfig cfg = load_effective_config(common);
    filo::FiloModel model = build_model(cfg);

    const filo::LoadResult loaded = load_split(cfg, split);
    print_warnings(loaded.warnings);
    if (loaded.samples.empty()) {
        std::cerr << "error: no training samples\n";
        return 1;
    }

    fs::create_directories(out_dir);
    std::ofstream log(out_dir + "/train_log.jsonl");
    auto on_epoch = [&](const filo::EpochLog& e) {
        json j = {{"phase", e.phase},
                  {"epoch", e.epoch},
                  {"loss", e.mean_loss},
                  {"global", e.mean_global},
                  {"local", e.mean_local}};
        log << j.dump() << '\n';
        std::cout << e.phase << " epoch " << e.epoch << ": loss " << e.mean_loss << '\n';
    };

    const filo::TrainResult main_result = filo::train_main(model, loaded.samples, on_epoch);
    filo::save_checkpoint(out_dir + "/checkpoint_phase1.filockpt", model,
                          cfg.train.epochs_main, 0);
    const filo::TrainResult adapter_result =
        filo::train_adapter(model, loaded.samples, on_epoch);
    filo::save_checkpoint(out_dir + "/checkpoint_final.filockpt", model, cfg.train.epochs_main,
                          cfg.train.epochs_adapter);
    filo::save_config(cfg, out_dir + "/config.json");

    std::cout << "phase 1 loss: " << main_result.initial_loss << " -> "
              << main_result.final_loss << '\n';
    std::cout << "phase 2 global loss: " << adapter_result.initial_loss << " -> "
              << adapter_result.final_loss << '\n';
    std::cout << "checkpoints written to " << out_dir << '\n';
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint_path,
             const std::string& out_dir, const std::string& split, bool dump_maps,
             bool allow_config_mismatch) {
    const filo::RunConfig cfg = load_effective_config(common);
    filo::FiloModel model = build_model(cfg);
    filo::apply_checkpoint(model, filo::load_checkpoint(checkpoint_path),
                           !allow_config_mismatch);

    const filo::LoadResult loaded = load_split(cfg, split);
    print_warnings(loaded.warnings);
    if (loaded.samples.empty()) {
        std::cerr << "error: no samples to evaluate\n";
        return 1;
    }

    fs::create_directories(out_dir);
    filo::EvalOptions opts;
    opts.per_image_pixel_auroc = cfg.eval.per_image_pixel_auroc;
    opts.top_k = cfg.eval.top_k;
    if (dump_maps) opts.dump_maps_dir = out_dir + "/maps";

    const std::vector<filo::EvalRecord> records = filo::run_eval(model, loaded.samples, opts);
    const filo::EvalReport report =
        filo::build_report(records, cfg.eval.per_image_pixel_auroc);
    print_warnings(report.warnings);

    const std::string table = filo::render_table(report);
    std::cout << table;
    std::ofstream(out_dir + "/report.txt") << table;
    std::ofstream(out_dir + "/report.json") << filo::report_to_json(report).dump(2) << '\n';
    filo::write_score_records(records, out_dir + "/scores.jsonl");
    std::cout << "report written to " << out_dir << '\n';
    return 0;
}

int cmd_infer(const CommonArgs& common, const std::string& checkpoint_path,
              const std::string& image_path, std::string class_name,
              const std::string& out_dir, bool allow_config_mismatch) {
    const filo::RunConfig cfg = load_effective_config(common);
    filo::FiloModel model = build_model(cfg);
    filo::apply_checkpoint(model, filo::load_checkpoint(checkpoint_path),
                           !allow_config_mismatch);

    if (class_name.empty()) {
        // Derive the class from path components when possible.
        for (fs::path p = fs::path(image_path).parent_path(); !p.empty();
             p = p.parent_path()) {
            const std::string part = p.filename().string();
            if (model.registry().has_class(part)) {
                class_name = part;
                break;
            }
            if (p == p.parent_path()) break;
        }
    }
    if (class_name.empty()) {
        std::cerr << "error: cannot derive the object class from the path; pass --class\n";
        return 1;
    }

    const filo::Image image = filo::img::read_image(image_path);
    const filo::Preprocessed pre = filo::preprocess(image, cfg.preprocess_config());
    const auto enc = model.encode_sample(pre.resized, pre.normalized, image_path, class_name);
    const filo::ForwardOutput fwd = model.forward(enc);
    auto ranked = model.rank_for_sample(enc);
    if (static_cast<int>(ranked.size()) > cfg.eval.top_k)
        ranked.resize(static_cast<std::size_t>(cfg.eval.top_k));

    fs::create_directories(out_dir);
    const std::string stem = fs::path(image_path).stem().string();
    const filo::Tensor& map = fwd.final_map.val();
    filo::img::write_pgm(map, out_dir + "/" + stem + "_heatmap.pgm");
#ifdef FILO_HAS_PNG
    filo::img::write_png_gray(map, out_dir + "/" + stem + "_heatmap.png");
#endif
    filo::tio::save_tensors(out_dir + "/" + stem + "_map.filotensors", {{"map", &map}},
                            filo::tio::Dtype::f32);

    const filo::ImageScore score = fwd.score.value();
    json j;
    j["image_id"] = image_path;
    j["class"] = class_name;
    j["s_global"] = score.s_global;
    j["s_display"] = score.display();
    j["text_term"] = score.text_term;
    j["map_term"] = score.map_term;
    j["position"] = fwd.position ? json(*fwd.position) : json();
    j["boxes"] = json::array();
    for (const auto& b : fwd.boxes)
        j["boxes"].push_back({{"x0", b.x0},
                              {"y0", b.y0},
                              {"x1", b.x1},
                              {"y1", b.y1},
                              {"confidence", b.confidence},
                              {"phrase", b.matched_phrase}});
    j["top_k_descriptions"] = json::array();
    for (const auto& d : ranked)
        j["top_k_descriptions"].push_back({{"phrase", d.phrase}, {"similarity", d.similarity}});
    std::ofstream(out_dir + "/" + stem + "_score.json") << j.dump(2) << '\n';

    std::cout << "s_global " << score.s_global << " (display " << score.display() << ")\n";
    for (const auto& d : ranked)
        std::cout << "  " << d.phrase << ": " << d.similarity << '\n';
    std::cout << "outputs written to " << out_dir << '\n';
    return 0;
}

int cmd_plot(const std::string& scores_path, const std::string& out_dir) {
    std::ifstream in(scores_path);
    if (!in.good()) {
        std::cerr << "error: cannot open " << scores_path << '\n';
        return 1;
    }
    std::vector<filo::EvalRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            std::cerr << "error: " << scores_path << ":" << lineno << ": " << e.what() << '\n';
            return 1;
        }
        filo::EvalRecord r;
        r.image_id = j.value("image_id", "");
        r.class_name = j.value("class", "unknown");
        r.label = j.value("label", 0);
        r.score.s_global = j.value("s_global", 0.0);
        records.push_back(std::move(r));
    }
    if (records.empty()) {
        std::cerr << "error: no score records in " << scores_path << '\n';
        return 1;
    }
    const auto files = filo::render_score_histograms(records, out_dir);
    for (const auto& f : files) std::cout << f << '\n';
    return 0;
}

int cmd_synth(const CommonArgs& common, const std::string& out_dir) {
    const filo::RunConfig cfg = load_effective_config(common);
    const auto samples = filo::generate_synthetic(cfg.synthetic_config(), cfg.seed);
    filo::write_dataset_tree(samples, out_dir);
    std::cout << "wrote " << samples.size() << " samples to " << out_dir << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"filo: zero-shot anomaly detection with fine-grained description "
                 "prompts and grounded localization"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string out_dir = "out";
    std::string checkpoint_path;
    std::string image_path;
    std::string class_name;
    std::string train_split = "train";
    std::string eval_split = "test";
    std::string scores_path;
    bool dump_maps = false;
    bool allow_config_mismatch = false;

    auto add_common = [&](CLI::App* sub, bool needs_config = true) {
        auto* opt = sub->add_option("--config", common.config_path, "run configuration (JSON)");
        if (needs_config) opt->required()->check(CLI::ExistingFile);
        sub->add_option("--dataset-root", common.dataset_root, "dataset root override");
        sub->add_option("--layout", common.layout, "dataset layout override")
            ->check(CLI::IsMember({"mvtec", "visa", "synthetic"}));
        sub->add_option("--seed", common.seed, "seed override");
    };

    CLI::App* train = app.add_subcommand("train", "two-phase training run");
    add_common(train);
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--split", train_split, "dataset split to train on")
        ->check(CLI::IsMember({"train", "test", "all"}));

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--out", out_dir, "output directory");
    eval->add_option("--split", eval_split, "dataset split to evaluate")
        ->check(CLI::IsMember({"train", "test", "all"}));
    eval->add_flag("--dump-maps", dump_maps, "write per-sample anomaly maps");
    eval->add_flag("--allow-config-mismatch", allow_config_mismatch,
                   "load checkpoints trained under a different config");

    CLI::App* infer = app.add_subcommand("infer", "score a single image");
    add_common(infer);
    infer->add_option("--checkpoint", checkpoint_path, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    infer->add_option("--image", image_path, "image to score")
        ->required()
        ->check(CLI::ExistingFile);
    infer->add_option("--class", class_name, "object class (derived from the path if omitted)");
    infer->add_option("--out", out_dir, "output directory");
    infer->add_flag("--allow-config-mismatch", allow_config_mismatch,
                    "load checkpoints trained under a different config");

    CLI::App* plot = app.add_subcommand("plot", "render per-class score histograms");
    plot->add_option("--scores", scores_path, "scores.jsonl from eval")
        ->required()
        ->check(CLI::ExistingFile);
    plot->add_option("--out", out_dir, "output directory");

    CLI::App* synth = app.add_subcommand("synth", "materialize the synthetic dataset");
    add_common(synth);
    synth->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Map CLI11's exit-code zoo onto ok/user-error.
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) return cmd_train(common, out_dir, train_split);
        if (eval->parsed())
            return cmd_eval(common, checkpoint_path, out_dir, eval_split, dump_maps,
                            allow_config_mismatch);
        if (infer->parsed())
            return cmd_infer(common, checkpoint_path, image_path, class_name, out_dir,
                             allow_config_mismatch);
        if (plot->parsed()) return cmd_plot(scores_path, out_dir);
        if (synth->parsed()) return cmd_synth(common, out_dir);
    } catch (const filo::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return filo::is_user_error(e.kind()) ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
