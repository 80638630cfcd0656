#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "filo/config.hpp"
#include "filo/core/autograd.hpp"
#include "filo/core/tensor_io.hpp"
#include "filo/data_eval.hpp"
#include "filo/pipeline.hpp"

// Two-phase training: context vectors + meta net + MMCI + per-stage linear
// maps first, then the adapter; plus checkpointing.
namespace filo {

// AdamW with decoupled weight decay: with zero gradients parameters still
// shrink by (1 - lr * wd) per step.
class AdamW {
public:
    explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8)
        : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    struct ParamRef {
        std::string name;
        ad::Var var;
        double lr;
    };

    void step(std::vector<ParamRef>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& p : params) {
            Tensor& x = p.var.mutable_val();
            const Tensor& g = p.var.grad(); // zeros if backward never reached it
            auto& [m, v] = state(p.name, x);
            for (std::int64_t i = 0; i < x.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                x[i] -= p.lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * x[i]);
            }
            p.var.zero_grad();
        }
    }

private:
    std::pair<Tensor, Tensor>& state(const std::string& name, const Tensor& like) {
        auto it = moments_.find(name);
        if (it == moments_.end())
            it = moments_.emplace(name, std::pair<Tensor, Tensor>{Tensor(like.shape, 0.0),
                                                                  Tensor(like.shape, 0.0)})
                     .first;
        return it->second;
    }

    double wd_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// --- checkpoints ------------------------------------------------------------

struct Checkpoint {
    std::uint64_t config_hash = 0;
    int epochs_main = 0;
    int epochs_adapter = 0;
    std::map<std::string, Tensor> tensors;
};

namespace ckpt_detail {
constexpr char kMagic[8] = {'F', 'I', 'L', 'O', 'C', 'K', 'P', '1'};
}

inline void save_checkpoint(const std::string& path, FiloModel& model, int epochs_main,
                            int epochs_adapter) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    out.write(ckpt_detail::kMagic, 8);
    tio::detail::write_pod<std::uint64_t>(out, config_hash(model.cfg()));
    tio::detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(epochs_main));
    tio::detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(epochs_adapter));
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (auto& [name, var] : model.named_params()) tensors.emplace_back(name, &var.val());
    // Checkpoints carry float64 so reload reproduces forward outputs.
    tio::write_tensors(out, tensors, tio::Dtype::f64);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::equal(magic, magic + 8, ckpt_detail::kMagic), ErrorKind::io,
            "not a checkpoint file: " + path);
    Checkpoint c;
    c.config_hash = tio::detail::read_pod<std::uint64_t>(in);
    c.epochs_main = static_cast<int>(tio::detail::read_pod<std::uint32_t>(in));
    c.epochs_adapter = static_cast<int>(tio::detail::read_pod<std::uint32_t>(in));
    c.tensors = tio::read_tensors(in, path);
    return c;
}

inline void apply_checkpoint(FiloModel& model, const Checkpoint& ckpt,
                             bool enforce_config_hash = true) {
    if (enforce_config_hash)
        require(ckpt.config_hash == config_hash(model.cfg()), ErrorKind::config,
                "checkpoint was trained with a different configuration "
                "(pass --allow-config-mismatch to load anyway)");
    for (auto& [name, var] : model.named_params()) {
        auto it = ckpt.tensors.find(name);
        require(it != ckpt.tensors.end(), ErrorKind::io,
                "checkpoint is missing tensor '" + name + "'");
        require(it->second.same_shape(var.val()), ErrorKind::config,
                "checkpoint tensor '" + name + "' has shape " + it->second.shape_str() +
                    ", expected " + var.val().shape_str());
        var.mutable_val() = it->second;
    }
}

// --- losses over a forward pass --------------------------------------------

// L = w_g * CE(s_global / 2, label) + w_l * (focal + dice + dice), the local
// term only when a ground-truth mask is available.
inline ad::Var total_loss(const ForwardOutput& fwd, int label,
                          const std::optional<Tensor>& mask, const RunConfig& cfg) {
    const LossConfig lc = cfg.loss_config();
    const ad::Var prob = ad::mul_const(fwd.score.s_global, 0.5);
    ad::Var loss = ad::mul_const(cross_entropy(prob, static_cast<double>(label), lc),
                                 cfg.train.global_weight);
    if (mask) {
        loss = ad::add(loss, ad::mul_const(local_loss(fwd.fused.abnormal, fwd.fused.normal,
                                                      *mask, lc),
                                           cfg.train.local_weight));
    }
    return loss;
}

// --- training orchestration --------------------------------------------------

struct EpochLog {
    std::string phase;
    int epoch = 0;
    double mean_loss = 0.0;
    double mean_global = 0.0;
    double mean_local = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

namespace train_detail {

struct PreparedSample {
    FiloModel::EncodedSample encoded;
    int label = 0;
    std::optional<Tensor> mask; // at evaluation resolution
};

inline std::vector<PreparedSample> prepare(FiloModel& model,
                                           const std::vector<Sample>& samples) {
    std::vector<PreparedSample> out;
    const PreprocessConfig pp = model.cfg().preprocess_config();
    for (const Sample& s : samples) {
        Preprocessed pre = preprocess(s.image, pp);
        PreparedSample ps;
        ps.encoded = model.encode_sample(pre.resized, pre.normalized, s.id, s.class_name);
        ps.label = s.label;
        ps.mask = mask_at_resolution(s.mask, pp.resolution);
        out.push_back(std::move(ps));
    }
    return out;
}

struct StepLoss {
    double total = 0.0, global = 0.0, local = 0.0;
};

inline StepLoss run_step(FiloModel& model, const PreparedSample& ps,
                         std::vector<AdamW::ParamRef>* params, AdamW* opt) {
    const ForwardOutput fwd = model.forward(ps.encoded);
    const ad::Var loss = total_loss(fwd, ps.label, ps.mask, model.cfg());
    StepLoss sl;
    sl.total = loss.item();
    const LossConfig lc = model.cfg().loss_config();
    sl.global = cross_entropy(ad::mul_const(fwd.score.s_global, 0.5),
                              static_cast<double>(ps.label), lc)
                    .item();
    sl.local = sl.total - model.cfg().train.global_weight * sl.global;
    require(std::isfinite(sl.total), ErrorKind::train,
            "NaN/inf loss at image " + ps.encoded.image_id + "; aborting");
    if (opt) {
        ad::backward(loss);
        opt->step(*params);
    }
    return sl;
}

inline EpochLog run_epoch(FiloModel& model, std::vector<PreparedSample>& data,
                          const std::string& phase, int epoch,
                          std::vector<AdamW::ParamRef>* params, AdamW* opt,
                          std::uint64_t shuffle_seed) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng::Rng r(rng::substream(shuffle_seed, phase + "/epoch/" + std::to_string(epoch)));
    r.shuffle(order);
    EpochLog log;
    log.phase = phase;
    log.epoch = epoch;
    for (std::size_t idx : order) {
        const StepLoss sl = run_step(model, data[idx], params, opt);
        log.mean_loss += sl.total;
        log.mean_global += sl.global;
        log.mean_local += sl.local;
    }
    const double inv = data.empty() ? 0.0 : 1.0 / static_cast<double>(data.size());
    log.mean_loss *= inv;
    log.mean_global *= inv;
    log.mean_local *= inv;
    return log;
}

// Mean loss without parameter updates.
inline EpochLog measure(FiloModel& model, std::vector<PreparedSample>& data,
                        const std::string& phase, int epoch) {
    EpochLog log;
    log.phase = phase;
    log.epoch = epoch;
    for (auto& ps : data) {
        const StepLoss sl = run_step(model, ps, nullptr, nullptr);
        log.mean_loss += sl.total;
        log.mean_global += sl.global;
        log.mean_local += sl.local;
    }
    const double inv = data.empty() ? 0.0 : 1.0 / static_cast<double>(data.size());
    log.mean_loss *= inv;
    log.mean_global *= inv;
    log.mean_local *= inv;
    return log;
}

} // namespace train_detail

using EpochCallback = std::function<void(const EpochLog&)>;

// Phase 1: optimizes context vectors, the meta net, MMCI kernels, and the
// per-stage linear maps against the full objective. The backbone stays
// frozen (it holds no trainable state).
inline TrainResult train_main(FiloModel& model, const std::vector<Sample>& train_samples,
                              const EpochCallback& on_epoch = {}) {
    const TrainConfig& tc = model.cfg().train;
    tc.validate();
    require(!train_samples.empty(), ErrorKind::data, "training set is empty");
    auto data = train_detail::prepare(model, train_samples);

    std::vector<AdamW::ParamRef> params;
    for (auto& [name, var] : model.named_params()) {
        if (name.rfind("prompts/", 0) == 0)
            params.push_back({name, var, tc.lr_ctx});
        else if (name.rfind("locmap/", 0) == 0)
            params.push_back({name, var, tc.lr_mmci});
        // adapter parameters train in phase 2
    }
    AdamW opt(tc.weight_decay);

    TrainResult result;
    const EpochLog initial = train_detail::measure(model, data, "main", 0);
    result.initial_loss = initial.mean_loss;
    if (on_epoch) on_epoch(initial);
    result.log.push_back(initial);
    for (int e = 1; e <= tc.epochs_main; ++e) {
        EpochLog log = train_detail::run_epoch(model, data, "main", e, &params, &opt,
                                               model.cfg().seed);
        if (on_epoch) on_epoch(log);
        result.log.push_back(log);
    }
    result.final_loss = result.log.back().mean_loss;
    return result;
}

// Phase 2: adapter only, against the global cross-entropy objective.
inline TrainResult train_adapter(FiloModel& model, const std::vector<Sample>& train_samples,
                                 const EpochCallback& on_epoch = {}) {
    const TrainConfig& tc = model.cfg().train;
    tc.validate();
    require(!train_samples.empty(), ErrorKind::data, "training set is empty");
    auto data = train_detail::prepare(model, train_samples);

    std::vector<AdamW::ParamRef> params;
    for (auto& [name, var] : model.named_params())
        if (name.rfind("scoring/", 0) == 0) params.push_back({name, var, tc.lr_adapter});
    AdamW opt(tc.weight_decay);

    auto global_only = [&](int epoch, bool update) {
        EpochLog log;
        log.phase = "adapter";
        log.epoch = epoch;
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        if (update) {
            rng::Rng r(rng::substream(model.cfg().seed, "adapter/epoch/" + std::to_string(epoch)));
            r.shuffle(order);
        }
        const LossConfig lc = model.cfg().loss_config();
        for (std::size_t idx : order) {
            const ForwardOutput fwd = model.forward(data[idx].encoded);
            const ad::Var loss = cross_entropy(ad::mul_const(fwd.score.s_global, 0.5),
                                               static_cast<double>(data[idx].label), lc);
            require(std::isfinite(loss.item()), ErrorKind::train,
                    "NaN/inf loss at image " + data[idx].encoded.image_id + "; aborting");
            log.mean_loss += loss.item();
            log.mean_global += loss.item();
            if (update) {
                ad::backward(loss);
                opt.step(params);
            }
        }
        const double inv = data.empty() ? 0.0 : 1.0 / static_cast<double>(data.size());
        log.mean_loss *= inv;
        log.mean_global *= inv;
        return log;
    };

    TrainResult result;
    const EpochLog initial = global_only(0, false);
    result.initial_loss = initial.mean_loss;
    if (on_epoch) on_epoch(initial);
    result.log.push_back(initial);
    for (int e = 1; e <= tc.epochs_adapter; ++e) {
        EpochLog log = global_only(e, true);
        if (on_epoch) on_epoch(log);
        result.log.push_back(log);
    }
    result.final_loss = result.log.back().mean_loss;
    return result;
}

} // namespace filo
