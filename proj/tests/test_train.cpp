// Training orchestration: optimizer semantics, determinism, checkpoints,
// frozen-backbone contract, and loss composition.

#include <filesystem>
#include <catch2/catch_amalgamated.hpp>

#include "filo/filo.hpp"

using namespace filo;
namespace fs = std::filesystem;

namespace {

// Tiny but trainable configuration for fast unit runs.
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.seed = 42;
    cfg.backbone.input_resolution = 32;
    cfg.backbone.patch_size = 8; // 4x4 grid
    cfg.backbone.stage_indices = {6, 12};
    cfg.backbone.feature_width = 16;
    cfg.prompts.n_ctx = 4;
    cfg.locmap.kernels = {{1, 1}, {3, 3}};
    cfg.locmap.sigma = 1.0;
    cfg.scoring.temperature = 5.0;
    cfg.train.epochs_main = 2;
    cfg.train.epochs_adapter = 1;
    cfg.data.layout = "synthetic";
    cfg.data.synthetic.n_train = 4;
    cfg.data.synthetic.n_test = 4;
    cfg.data.synthetic.resolution = 32;
    cfg.data.synthetic.classes = {"weave"};
    return cfg;
}

DescriptionRegistry tiny_registry() {
    DescriptionRegistry reg;
    reg.normal_states = {"flawless"};
    reg.abnormal_states = {"damaged"};
    reg.classes["weave"] = {"dark blotch", "scratch across the weave"};
    return reg;
}

std::vector<Sample> train_samples(const RunConfig& cfg) {
    return load_dataset("", DatasetLayout::synthetic, "train", cfg.synthetic_config(), cfg.seed)
        .samples;
}

std::map<std::string, Tensor> snapshot(FiloModel& m) {
    std::map<std::string, Tensor> out;
    for (auto& [name, var] : m.named_params()) out[name] = var.val();
    return out;
}

} // namespace

TEST_CASE("AdamW applies decoupled weight decay with zero gradients", "[train]") {
    AdamW opt(0.01);
    ad::Var x = ad::Var::leaf(Tensor::from({2}, {4.0, -2.0}));
    std::vector<AdamW::ParamRef> params = {{"x", x, 0.1}};
    opt.step(params); // gradient never set -> pure decay
    CHECK(x.val()[0] == Catch::Approx(4.0 * (1.0 - 0.1 * 0.01)).epsilon(1e-12));
    CHECK(x.val()[1] == Catch::Approx(-2.0 * (1.0 - 0.1 * 0.01)).epsilon(1e-12));
    opt.step(params);
    CHECK(x.val()[0] == Catch::Approx(4.0 * std::pow(1.0 - 0.001, 2)).epsilon(1e-12));
}

TEST_CASE("AdamW moves against the gradient", "[train]") {
    AdamW opt(0.0);
    ad::Var x = ad::Var::leaf(Tensor::scalar(1.0));
    std::vector<AdamW::ParamRef> params = {{"x", x, 0.05}};
    for (int i = 0; i < 20; ++i) {
        ad::Var loss = ad::mul(x, x);
        ad::backward(loss);
        opt.step(params);
    }
    CHECK(std::abs(x.val()[0]) < 1.0);
}

TEST_CASE("zero learning rates leave parameters unchanged", "[train]") {
    RunConfig cfg = tiny_config();
    cfg.train.lr_ctx = 0.0;
    cfg.train.lr_mmci = 0.0;
    cfg.train.lr_adapter = 0.0;
    cfg.train.weight_decay = 0.0;
    cfg.train.epochs_main = 1;
    cfg.train.epochs_adapter = 1;
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    const auto before = snapshot(model);
    const auto samples = train_samples(cfg);
    train_main(model, samples);
    train_adapter(model, samples);
    for (auto& [name, t] : snapshot(model)) {
        INFO(name);
        CHECK(max_abs_diff(t, before.at(name)) == 0.0);
    }
}

TEST_CASE("training decreases the loss on the tiny dataset", "[train]") {
    RunConfig cfg = tiny_config();
    cfg.train.epochs_main = 3;
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    const TrainResult r = train_main(model, train_samples(cfg));
    INFO("initial " << r.initial_loss << " final " << r.final_loss);
    CHECK(r.final_loss < r.initial_loss);
}

TEST_CASE("identical seeds give identical checkpoints", "[train]") {
    const RunConfig cfg = tiny_config();
    const auto samples = train_samples(cfg);

    FiloModel a = FiloModel::create(cfg, tiny_registry());
    train_main(a, samples);
    train_adapter(a, samples);

    FiloModel b = FiloModel::create(cfg, tiny_registry());
    train_main(b, samples);
    train_adapter(b, samples);

    auto sa = snapshot(a);
    auto sb = snapshot(b);
    REQUIRE(sa.size() == sb.size());
    for (auto& [name, t] : sa) {
        INFO(name);
        CHECK(max_abs_diff(t, sb.at(name)) <= 1e-6);
    }
}

TEST_CASE("checkpoint round-trip reproduces forward outputs", "[train]") {
    const RunConfig cfg = tiny_config();
    const auto samples = train_samples(cfg);
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    train_main(model, samples);

    const fs::path path = fs::temp_directory_path() / "filo_test_ckpt.filockpt";
    save_checkpoint(path.string(), model, cfg.train.epochs_main, 0);

    // Forward before reload.
    const PreprocessConfig pp = cfg.preprocess_config();
    const Preprocessed pre = preprocess(samples[1].image, pp);
    const auto enc = model.encode_sample(pre.resized, pre.normalized, samples[1].id,
                                         samples[1].class_name);
    const ForwardOutput before = model.forward(enc);

    FiloModel reloaded = FiloModel::create(cfg, tiny_registry());
    const Checkpoint ckpt = load_checkpoint(path.string());
    CHECK(ckpt.epochs_main == cfg.train.epochs_main);
    apply_checkpoint(reloaded, ckpt);
    const auto enc2 = reloaded.encode_sample(pre.resized, pre.normalized, samples[1].id,
                                             samples[1].class_name);
    const ForwardOutput after = reloaded.forward(enc2);

    CHECK(std::abs(before.score.s_global.item() - after.score.s_global.item()) <= 1e-6);
    CHECK(max_abs_diff(before.final_map.val(), after.final_map.val()) <= 1e-6);

    SECTION("config hash mismatch is rejected unless overridden") {
        RunConfig other = cfg;
        other.scoring.temperature = 7.0;
        FiloModel wrong = FiloModel::create(other, tiny_registry());
        REQUIRE_THROWS_AS(apply_checkpoint(wrong, ckpt), Error);
        CHECK_NOTHROW(apply_checkpoint(wrong, ckpt, /*enforce_config_hash=*/false));
    }
    fs::remove(path);
}

TEST_CASE("backbone is bit-identical before and after training", "[train]") {
    const RunConfig cfg = tiny_config();
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    const auto samples = train_samples(cfg);
    const Preprocessed pre = preprocess(samples[0].image, cfg.preprocess_config());
    const ImageFeatures before = model.image_encoder().encode_image(pre.normalized);
    train_main(model, samples);
    const ImageFeatures after = model.image_encoder().encode_image(pre.normalized);
    CHECK(max_abs_diff(before.global_feature, after.global_feature) == 0.0);
    for (std::size_t s = 0; s < before.stages.size(); ++s) {
        CHECK(max_abs_diff(before.stages[s].qkv_patches, after.stages[s].qkv_patches) == 0.0);
        CHECK(max_abs_diff(before.stages[s].vv_patches, after.stages[s].vv_patches) == 0.0);
    }
}

TEST_CASE("NaN loss aborts with a diagnostic", "[train]") {
    const RunConfig cfg = tiny_config();
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    // Poison a kernel weight: the NaN reaches the loss through the map path.
    model.heads()[0].kernels[0].weights.mutable_val()[0] =
        std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_MATCHES(train_main(model, train_samples(cfg)), Error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("aborting")));
}

TEST_CASE("gradient flows into the context vectors", "[train]") {
    const RunConfig cfg = tiny_config();
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    const auto samples = train_samples(cfg);
    const Preprocessed pre = preprocess(samples[1].image, cfg.preprocess_config());
    const auto enc = model.encode_sample(pre.resized, pre.normalized, samples[1].id,
                                         samples[1].class_name);
    const ForwardOutput fwd = model.forward(enc);
    const ad::Var loss = total_loss(fwd, samples[1].label,
                                    mask_at_resolution(samples[1].mask,
                                                       cfg.backbone.input_resolution),
                                    cfg);
    ad::backward(loss);
    CHECK(model.ctx().normal_ctx.grad().norm2() > 0.0);
    CHECK(model.ctx().abnormal_ctx.grad().norm2() > 0.0);
    bool kernel_grad = false;
    for (auto& head : model.heads())
        for (auto& k : head.kernels) kernel_grad = kernel_grad || k.weights.grad().norm2() > 0.0;
    CHECK(kernel_grad);
}

TEST_CASE("total_loss on an ideal prediction approaches -1", "[train]") {
    RunConfig cfg = tiny_config();
    // Hand-built forward output: fused maps match the ground truth exactly
    // and the global score is exactly 2 (prob 1.0 after halving).
    Tensor gt = Tensor::from({2, 2}, {1, 1, 0, 0});
    Tensor inv(gt.shape);
    for (std::int64_t i = 0; i < gt.size(); ++i) inv[i] = 1.0 - gt[i];
    ForwardOutput fwd;
    fwd.fused.abnormal = ad::Var::constant(gt);
    fwd.fused.normal = ad::Var::constant(inv);
    fwd.score.text_term = ad::Var::scalar(1.0);
    fwd.score.map_term = ad::Var::scalar(1.0);
    fwd.score.s_global = ad::Var::scalar(2.0);
    const double l = total_loss(fwd, 1, gt, cfg).item();
    // L_global ~ 0 (clamped log) and L_local = 0 - 0.5 - 0.5.
    CHECK(l == Catch::Approx(-1.0).margin(1e-4));

    SECTION("all-normal image with zero abnormal map has zero focal term") {
        Tensor zeros(std::vector<int>{2, 2}, 0.0);
        Tensor ones(std::vector<int>{2, 2}, 1.0);
        ForwardOutput fn;
        fn.fused.abnormal = ad::Var::constant(zeros);
        fn.fused.normal = ad::Var::constant(ones);
        fn.score.text_term = ad::Var::scalar(0.0);
        fn.score.map_term = ad::Var::scalar(0.0);
        fn.score.s_global = ad::Var::scalar(0.0);
        const double ln = total_loss(fn, 0, zeros, cfg).item();
        // CE(eps, 0) ~ 0, focal = 0, dice(0, 0) = 0, dice(1, 1) = -1/2.
        CHECK(ln == Catch::Approx(-0.5).margin(1e-4));
    }
}

TEST_CASE("phase 2 trains only the adapter", "[train]") {
    const RunConfig cfg = tiny_config();
    FiloModel model = FiloModel::create(cfg, tiny_registry());
    const auto samples = train_samples(cfg);
    const auto before = snapshot(model);
    const TrainResult r = train_adapter(model, samples);
    CHECK(r.log.size() == static_cast<std::size_t>(cfg.train.epochs_adapter) + 1);
    for (auto& [name, t] : snapshot(model)) {
        INFO(name);
        if (name.rfind("scoring/", 0) == 0) continue;
        CHECK(max_abs_diff(t, before.at(name)) == 0.0); // frozen in phase 2
    }
}
