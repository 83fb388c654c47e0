#pragma once

// Joint source/target rectified-flow training with the latent and attention
// regional constraints, AdamW with global-norm clipping, a two-stage
// learning rate, checkpoints and a finite-difference gradient check.
//
// Random draws per step, in order: batch indices (one engine draw each),
// then for every sample its timestep followed by the joint noise grid.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "reco/array_io.hpp"
#include "reco/datagen.hpp"
#include "reco/flow.hpp"
#include "reco/losses.hpp"
#include "reco/model.hpp"

namespace reco {

// ---- configuration ------------------------------------------------------

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t batch = 8;
    double stage1_lr = 1e-4;
    double stage2_lr = 2e-5;
    std::size_t stage_boundary = 150;  // steps 1..boundary use stage1_lr
    LossConfig loss_cfg;
    ModelConfig model_cfg;
    TimestepDistribution timesteps;
    std::uint64_t seed = 0;
    std::vector<std::string> shards;
    double grad_clip = 1.0;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    double beta1 = 0.9, beta2 = 0.999, weight_decay = 0.01, eps = 1e-8;
    bool freeze_base = false;  // train only adapters and the condition branch
    std::size_t threads = 1;
    std::string out_dir = ".";

    void validate() const {
        if (stage_boundary > steps) throw ValidationError("TrainConfig: stage_boundary exceeds steps");
        if (!(stage1_lr > 0) || !(stage2_lr > 0)) throw ValidationError("TrainConfig: learning rates must be > 0");
        if (batch == 0) throw ValidationError("TrainConfig: batch must be >= 1");
        if (!(grad_clip > 0)) throw ValidationError("TrainConfig: grad_clip must be > 0");
        loss_cfg.validate();
        model_cfg.validate();
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"token_dim", c.token_dim},   {"heads", c.heads},
            {"depth", c.depth},           {"instruction_vocab", c.instruction_vocab},
            {"instruction_len", c.instruction_len}, {"lora_rank", c.lora_rank},
            {"latent_channels", c.latent_channels}, {"ffn_mult", c.ffn_mult},
            {"max_frames", c.max_frames}, {"max_height", c.max_height},
            {"max_width", c.max_width},   {"cond_both_halves", c.cond_both_halves}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.token_dim = j.at("token_dim");
    c.heads = j.at("heads");
    c.depth = j.at("depth");
    c.instruction_vocab = j.at("instruction_vocab");
    c.instruction_len = j.at("instruction_len");
    c.lora_rank = j.at("lora_rank");
    c.latent_channels = j.at("latent_channels");
    c.ffn_mult = j.at("ffn_mult");
    c.max_frames = j.at("max_frames");
    c.max_height = j.at("max_height");
    c.max_width = j.at("max_width");
    c.cond_both_halves = j.at("cond_both_halves");
    return c;
}

inline nlohmann::json to_json(const LossConfig& c) {
    return {{"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"region_mean_mode", c.region_mean_mode == RegionMeanMode::masked ? "masked" : "global"},
            {"attn_layers", c.attn_layers},
            {"enable_latent", c.enable_latent},
            {"enable_attn", c.enable_attn}};
}

inline LossConfig loss_config_from_json(const nlohmann::json& j) {
    LossConfig c;
    c.lambda1 = j.at("lambda1");
    c.lambda2 = j.at("lambda2");
    c.region_mean_mode = j.at("region_mean_mode") == "global" ? RegionMeanMode::global : RegionMeanMode::masked;
    c.attn_layers = j.at("attn_layers").get<std::vector<std::size_t>>();
    c.enable_latent = j.at("enable_latent");
    c.enable_attn = j.at("enable_attn");
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch", c.batch},
            {"stage1_lr", c.stage1_lr},
            {"stage2_lr", c.stage2_lr},
            {"stage_boundary", c.stage_boundary},
            {"loss", to_json(c.loss_cfg)},
            {"model", to_json(c.model_cfg)},
            {"timestep_mu", c.timesteps.mu},
            {"timestep_sigma", c.timesteps.sigma},
            {"seed", c.seed},
            {"shards", c.shards},
            {"grad_clip", c.grad_clip},
            {"checkpoint_every", c.checkpoint_every},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"weight_decay", c.weight_decay},
            {"eps", c.eps},
            {"freeze_base", c.freeze_base},
            {"threads", c.threads},
            {"out_dir", c.out_dir}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.steps = j.at("steps");
    c.batch = j.at("batch");
    c.stage1_lr = j.at("stage1_lr");
    c.stage2_lr = j.at("stage2_lr");
    c.stage_boundary = j.at("stage_boundary");
    c.loss_cfg = loss_config_from_json(j.at("loss"));
    c.model_cfg = model_config_from_json(j.at("model"));
    c.timesteps.mu = j.at("timestep_mu");
    c.timesteps.sigma = j.at("timestep_sigma");
    c.seed = j.at("seed");
    c.shards = j.at("shards").get<std::vector<std::string>>();
    c.grad_clip = j.at("grad_clip");
    c.checkpoint_every = j.at("checkpoint_every");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.weight_decay = j.at("weight_decay");
    c.eps = j.at("eps");
    c.freeze_base = j.at("freeze_base");
    c.threads = j.at("threads");
    c.out_dir = j.at("out_dir");
    return c;
}

// ---- per-sample objective -----------------------------------------------

/// Latent-space view of one SamplePair.
template <class T>
struct TrainingExample {
    LatentGrid<T> source, target;
    EditMask mask;
    RegionPartition partition;
    Instruction instruction;
    Task task = Task::add;
};

template <class T>
TrainingExample<T> prepare_example(const SamplePair& p) {
    TrainingExample<T> ex;
    ex.source = encode_video<T>(p.source, kCodecFactor);
    ex.target = encode_video<T>(p.target, kCodecFactor);
    ex.mask = binarize_mask(p.pixel_mask, kCodecFactor);
    ex.partition = build_partition(ex.mask, ex.source.width());
    ex.instruction = p.instruction;
    ex.task = p.task;
    return ex;
}

template <class T>
struct SampleObjective {
    Var<T> l_ic, l_latent, l_edit, l_global, total;
};

/// Builds every loss term for one example on `tape`. x_t is a constant, so
/// the one-step estimate x1_hat = x_t + (1-t) u carries gradient through u
/// only.
template <class T>
SampleObjective<T> sample_objective(Tape<T>& tape, const BoundParams<T>& bound, const TrainingExample<T>& ex, double t,
                                    const LatentGrid<T>& noise, const LossConfig& lc) {
    const auto x1 = concat_widthwise(ex.source, ex.target);
    if (noise.dims() != x1.grid.dims()) throw ShapeError("sample_objective: noise " + noise.dims().str());
    const InContextLatent<T> x0{noise, x1.single_width};
    const auto xt = noisy_interpolate(x1, x0, t);
    const auto v = velocity_target(x1.grid, x0.grid);

    auto g = forward_graph(tape, bound, xt, ex.source, ex.instruction, t);
    const auto n = g.velocity.rows(), c = g.velocity.cols();

    SampleObjective<T> o;
    o.l_ic = flow_matching_loss(g.velocity, tape.constant(Eigen::Map<const Mat<T>>(v.values().data(), n, c)));

    Var<T> xt_tok = tape.constant(Eigen::Map<const Mat<T>>(xt.grid.values().data(), n, c));
    Var<T> x1_hat = ad::add(xt_tok, ad::scale(g.velocity, static_cast<T>(1.0 - t)));
    const auto& part = ex.partition;
    const auto src_ids = part.source();
    Var<T> src_hat = ad::gather_rows(x1_hat, std::vector<Eigen::Index>(src_ids.begin(), src_ids.end()));
    Var<T> tgt_hat = ad::gather_rows(x1_hat, std::vector<Eigen::Index>(part.a3.begin(), part.a3.end()));
    o.l_latent = latent_region_loss(latent_diff(src_hat, tgt_hat), ex.mask, lc.region_mean_mode);

    o.l_edit = attention_edit_loss(g.attention, g.heads, part, lc.attn_layers);
    o.l_global = attention_global_loss(g.attention, g.heads, part, lc.attn_layers);

    o.total = o.l_ic;
    if (lc.enable_latent) o.total = ad::add(o.total, ad::scale(o.l_latent, static_cast<T>(lc.lambda1)));
    if (lc.enable_attn)
        o.total = ad::add(o.total, ad::scale(ad::add(o.l_edit, o.l_global), static_cast<T>(lc.lambda2)));
    return o;
}

// ---- optimizer ----------------------------------------------------------

struct OptimizerState {
    std::vector<Mat<float>> m, v;
    std::uint64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, weight_decay = 0.01, eps = 1e-8;

    static OptimizerState for_params(const ModelParams<float>& p, const TrainConfig& cfg) {
        OptimizerState s;
        s.beta1 = cfg.beta1;
        s.beta2 = cfg.beta2;
        s.weight_decay = cfg.weight_decay;
        s.eps = cfg.eps;
        for (std::size_t i = 0; i < p.count(); ++i) {
            s.m.push_back(Mat<float>::Zero(p.tensor(i).rows(), p.tensor(i).cols()));
            s.v.push_back(Mat<float>::Zero(p.tensor(i).rows(), p.tensor(i).cols()));
        }
        return s;
    }
};

inline double global_norm(const std::vector<Mat<float>>& grads) {
    double s = 0;
    for (const auto& g : grads) s += g.cast<double>().squaredNorm();
    return std::sqrt(s);
}

/// Scales gradients in place so their global norm is at most max_norm;
/// returns the norm before clipping.
inline double clip_grad_norm(std::vector<Mat<float>>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (norm > max_norm) {
        const float s = static_cast<float>(max_norm / norm);
        for (auto& g : grads) g *= s;
    }
    return norm;
}

/// Decoupled-weight-decay Adam step; parameters with trainable[i] == false
/// are left untouched.
inline void adamw_update(ModelParams<float>& p, OptimizerState& s, const std::vector<Mat<float>>& grads, double lr,
                         const std::vector<bool>& trainable) {
    s.step += 1;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    const float b1 = static_cast<float>(s.beta1), b2 = static_cast<float>(s.beta2);
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float decay = static_cast<float>(1.0 - lr * s.weight_decay);
    const float eps = static_cast<float>(s.eps);
    for (std::size_t i = 0; i < p.count(); ++i) {
        if (!trainable.empty() && !trainable[i]) continue;
        auto& w = p.tensor(i);
        const auto& g = grads[i];
        s.m[i] = b1 * s.m[i] + (1.f - b1) * g;
        s.v[i] = b2 * s.v[i] + (1.f - b2) * g.cwiseProduct(g);
        if (s.weight_decay != 0.0) w *= decay;
        w.array() -= step_size * s.m[i].array() / ((s.v[i].array() * inv_bc2).sqrt() + eps);
    }
}

// ---- checkpoint container -----------------------------------------------
//
// "RCCK", u16 version, JSON config block (u32 length + UTF-8), u32 param
// count, per param {name, array block}, then per param {m block, v block}.

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelParams<float> params;
    OptimizerState optimizer;
    std::uint64_t step = 0;
    TrainConfig config;
    std::string rng_state;
};

namespace detail {
inline void write_matrix(io::ByteWriter& w, const Mat<float>& m) {
    const std::uint32_t dims[] = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    io::write_array(w, dims, std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}
inline Mat<float> read_matrix(io::ByteReader& r) {
    auto a = io::read_array(r);
    if (a.dtype != io::DType::f32 || a.dims.size() != 2) throw FormatError::malformed("checkpoint: expected f32 matrix");
    Mat<float> m(a.dims[0], a.dims[1]);
    std::copy(a.f32.begin(), a.f32.end(), m.data());
    return m;
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    io::ByteWriter w;
    w.tag("RCCK");
    w.u16(kCheckpointVersion);
    nlohmann::json meta = {{"train", to_json(ck.config)},
                           {"model", to_json(ck.params.cfg)},
                           {"step", ck.step},
                           {"optimizer_step", ck.optimizer.step},
                           {"rng", ck.rng_state},
                           {"beta1", ck.optimizer.beta1},
                           {"beta2", ck.optimizer.beta2},
                           {"weight_decay", ck.optimizer.weight_decay},
                           {"eps", ck.optimizer.eps}};
    w.str(meta.dump());
    w.u32(static_cast<std::uint32_t>(ck.params.count()));
    for (std::size_t i = 0; i < ck.params.count(); ++i) {
        w.str(ck.params.name(i));
        detail::write_matrix(w, ck.params.tensor(i));
    }
    const bool has_opt = ck.optimizer.m.size() == ck.params.count();
    w.u8(has_opt ? 1 : 0);
    if (has_opt)
        for (std::size_t i = 0; i < ck.params.count(); ++i) {
            detail::write_matrix(w, ck.optimizer.m[i]);
            detail::write_matrix(w, ck.optimizer.v[i]);
        }
    return w.data();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> data) {
    io::ByteReader r(data);
    if (data.size() < 4) throw FormatError::truncated("checkpoint: shorter than its magic");
    if (!r.tag("RCCK")) throw FormatError::magic("checkpoint: bad magic (expected RCCK)");
    const auto version = r.u16();
    if (version != kCheckpointVersion)
        throw FormatError::version("checkpoint: version " + std::to_string(version) + ", expected " +
                                   std::to_string(kCheckpointVersion));
    Checkpoint ck;
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.str());
        ck.config = train_config_from_json(meta.at("train"));
        ck.params.cfg = model_config_from_json(meta.at("model"));
        ck.step = meta.at("step");
        ck.optimizer.step = meta.at("optimizer_step");
        ck.rng_state = meta.at("rng");
        ck.optimizer.beta1 = meta.at("beta1");
        ck.optimizer.beta2 = meta.at("beta2");
        ck.optimizer.weight_decay = meta.at("weight_decay");
        ck.optimizer.eps = meta.at("eps");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError::malformed(std::string("checkpoint: config block: ") + e.what());
    }
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        auto name = r.str();
        ck.params.add(name, detail::read_matrix(r));
    }
    if (r.u8())
        for (std::uint32_t i = 0; i < n; ++i) {
            ck.optimizer.m.push_back(detail::read_matrix(r));
            ck.optimizer.v.push_back(detail::read_matrix(r));
        }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) { io::write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = io::read_file(path);
    return decode_checkpoint(bytes);
}

// ---- training loop ------------------------------------------------------

struct StepLog {
    std::uint64_t step = 0;
    LossBreakdown losses;
    double lr = 0;
    double grad_norm = 0;

    nlohmann::json to_json() const {
        auto j = losses.to_json();
        j["step"] = step;
        j["lr"] = lr;
        return j;
    }
};

class Trainer {
public:
    Trainer(TrainConfig cfg, std::vector<TrainingExample<float>> data)
        : cfg_(std::move(cfg)), data_(std::move(data)), rng_(cfg_.seed) {
        cfg_.validate();
        if (data_.empty()) throw ValidationError("Trainer: no training data");
        params_ = init_params<float>(cfg_.model_cfg, cfg_.seed);
        opt_ = OptimizerState::for_params(params_, cfg_);
        refresh_trainable();
    }

    Trainer(const Checkpoint& ck, std::vector<TrainingExample<float>> data)
        : cfg_(ck.config), data_(std::move(data)), params_(ck.params), opt_(ck.optimizer), step_(ck.step) {
        cfg_.validate();
        if (data_.empty()) throw ValidationError("Trainer: no training data");
        if (opt_.m.size() != params_.count()) opt_ = OptimizerState::for_params(params_, cfg_);
        rng_.restore(ck.rng_state);
        refresh_trainable();
    }

    const TrainConfig& config() const { return cfg_; }
    TrainConfig& config() { return cfg_; }
    const ModelParams<float>& params() const { return params_; }
    const OptimizerState& optimizer() const { return opt_; }
    std::uint64_t step_count() const { return step_; }

    double lr_for_step(std::uint64_t step) const {
        return step <= cfg_.stage_boundary ? cfg_.stage1_lr : cfg_.stage2_lr;
    }

    /// Draws a batch from the data with the trainer's rng and runs one
    /// optimization step.
    StepLog step() {
        std::vector<const TrainingExample<float>*> batch;
        for (std::size_t b = 0; b < cfg_.batch; ++b) batch.push_back(&data_[rng_.below(data_.size())]);
        return train_step(batch);
    }

    /// One optimization step over the given examples: per-sample objectives,
    /// batch-mean gradients, clipping, AdamW.
    StepLog train_step(const std::vector<const TrainingExample<float>*>& batch) {
        if (batch.empty()) throw ValidationError("train_step: empty batch");
        for (const auto* ex : batch)
            if (ex->source.dims() != batch[0]->source.dims()) throw ShapeError("train_step: batch mixes latent dims");

        struct Draw {
            double t;
            LatentGrid<float> noise;
        };
        std::vector<Draw> draws;
        for (const auto* ex : batch) {
            GridDims jd = ex->source.dims();
            jd.width *= 2;
            Draw d{sample_timestep(rng_, cfg_.timesteps), LatentGrid<float>(jd)};
            for (auto& x : d.noise.values()) x = static_cast<float>(rng_.gaussian());
            draws.push_back(std::move(d));
        }

        struct Result {
            std::vector<Mat<float>> grads;
            double l_ic = 0, l_latent = 0, l_edit = 0, l_global = 0;
        };
        std::vector<Result> results(batch.size());
        auto run_one = [&](std::size_t i) {
            Tape<float> tape;
            auto bound = bind(tape, params_);
            auto o = sample_objective(tape, bound, *batch[i], draws[i].t, draws[i].noise, cfg_.loss_cfg);
            results[i].l_ic = o.l_ic.item();
            results[i].l_latent = o.l_latent.item();
            results[i].l_edit = o.l_edit.item();
            results[i].l_global = o.l_global.item();
            results[i].grads = backward(tape, o.total, bound);
        };
        const std::size_t workers = std::min(cfg_.threads, batch.size());
        if (workers <= 1) {
            for (std::size_t i = 0; i < batch.size(); ++i) run_one(i);
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w)
                pool.emplace_back([&, w] {
                    for (std::size_t i = w; i < batch.size(); i += workers) run_one(i);
                });
        }

        // reduce in sample order so the result is independent of threading
        std::vector<Mat<float>> grads;
        double l_ic = 0, l_latent = 0, l_edit = 0, l_global = 0;
        for (std::size_t p = 0; p < params_.count(); ++p)
            grads.push_back(Mat<float>::Zero(params_.tensor(p).rows(), params_.tensor(p).cols()));
        for (auto& r : results) {
            for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += r.grads[p];
            l_ic += r.l_ic;
            l_latent += r.l_latent;
            l_edit += r.l_edit;
            l_global += r.l_global;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (auto& g : grads) g *= static_cast<float>(inv);

        StepLog log;
        log.losses = total_loss(l_ic * inv, l_latent * inv, l_edit * inv, l_global * inv, cfg_.loss_cfg);
        if (!std::isfinite(log.losses.total))
            throw NumericError("train_step: non-finite loss at step " + std::to_string(step_ + 1) +
                               " (l_ic=" + std::to_string(log.losses.l_ic) + ")");
        log.step = ++step_;
        log.lr = lr_for_step(log.step);
        if (!cfg_.freeze_base) {
            log.grad_norm = clip_grad_norm(grads, cfg_.grad_clip);
        } else {
            for (std::size_t p = 0; p < grads.size(); ++p)
                if (!trainable_[p]) grads[p].setZero();
            log.grad_norm = clip_grad_norm(grads, cfg_.grad_clip);
        }
        adamw_update(params_, opt_, grads, log.lr, trainable_);
        return log;
    }

    Checkpoint checkpoint() const { return {params_, opt_, step_, cfg_, rng_.state()}; }

private:
    void refresh_trainable() {
        trainable_.assign(params_.count(), true);
        if (!cfg_.freeze_base) return;
        for (std::size_t i = 0; i < params_.count(); ++i) {
            const auto& n = params_.name(i);
            trainable_[i] = n.ends_with(".lora_a") || n.ends_with(".lora_b") || n.ends_with(".cond");
        }
    }

    TrainConfig cfg_;
    std::vector<TrainingExample<float>> data_;
    Rng rng_;
    ModelParams<float> params_;
    OptimizerState opt_;
    std::vector<bool> trainable_;
    std::uint64_t step_ = 0;
};

inline std::vector<TrainingExample<float>> load_examples(const std::vector<std::string>& shards) {
    std::vector<TrainingExample<float>> out;
    for (const auto& path : shards) {
        Shard s;
        try {
            s = read_shard(path);
        } catch (const Error& e) {
            throw Error(e.kind(), path + ": " + e.what());
        }
        for (const auto& p : s.pairs) out.push_back(prepare_example<float>(p));
    }
    return out;
}

struct TrainReport {
    std::uint64_t steps = 0;
    LossBreakdown final_losses;
    double final_lr = 0;
    double wall_seconds = 0;
    std::string log_path;
    std::string checkpoint_path;

    nlohmann::json to_json() const {
        return {{"steps", steps},
                {"final", final_losses.to_json()},
                {"final_lr", final_lr},
                {"wall_seconds", wall_seconds},
                {"log", log_path},
                {"checkpoint", checkpoint_path}};
    }
};

/// Runs (or resumes) training, appending one JSON line per step to
/// out_dir/train_log.jsonl and writing checkpoints to out_dir.
inline TrainReport run(const TrainConfig& cfg, const std::optional<std::string>& resume_from = std::nullopt,
                       std::vector<TrainingExample<float>> data = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    if (data.empty()) data = load_examples(cfg.shards);
    std::optional<Trainer> trainer;
    if (resume_from) {
        Checkpoint ck = load_checkpoint(*resume_from);
        ck.config.steps = cfg.steps;
        ck.config.out_dir = cfg.out_dir;
        ck.config.checkpoint_every = cfg.checkpoint_every;
        ck.config.threads = cfg.threads;
        trainer.emplace(ck, std::move(data));
    } else {
        trainer.emplace(cfg, std::move(data));
    }
    std::filesystem::create_directories(cfg.out_dir);
    TrainReport rep;
    rep.log_path = (std::filesystem::path(cfg.out_dir) / "train_log.jsonl").string();
    std::ofstream log(rep.log_path, resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open " + rep.log_path);
    const auto& tc = trainer->config();
    while (trainer->step_count() < tc.steps) {
        StepLog s = trainer->step();
        log << s.to_json().dump() << '\n';
        rep.final_losses = s.losses;
        rep.final_lr = s.lr;
        if (tc.checkpoint_every && s.step % tc.checkpoint_every == 0) {
            auto p = std::filesystem::path(tc.out_dir) / ("checkpoint_" + std::to_string(s.step) + ".rcck");
            save_checkpoint(trainer->checkpoint(), p.string());
        }
    }
    log.flush();
    if (!log) throw IoError("write failed for " + rep.log_path);
    rep.checkpoint_path = (std::filesystem::path(tc.out_dir) / "checkpoint_final.rcck").string();
    save_checkpoint(trainer->checkpoint(), rep.checkpoint_path);
    rep.steps = trainer->step_count();
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// ---- gradient check -----------------------------------------------------

enum class LossSelection { ic, latent, attn, total };

inline const char* selection_name(LossSelection s) {
    switch (s) {
        case LossSelection::ic: return "ic";
        case LossSelection::latent: return "latent";
        case LossSelection::attn: return "attn";
        case LossSelection::total: return "total";
    }
    return "?";
}

struct GradCheckReport {
    LossSelection selection = LossSelection::total;
    std::map<std::string, double> group_error;  // per parameter tensor
    double max_rel_error = 0;
    std::size_t checked = 0;

    nlohmann::json to_json() const {
        return {{"loss", selection_name(selection)}, {"max_rel_error", max_rel_error}, {"checked", checked},
                {"groups", group_error}};
    }
};

/// Tiny double-precision configuration: one block, width 8, 1x2x2x4 latents.
inline ModelConfig grad_check_config() {
    ModelConfig c;
    c.token_dim = 8;
    c.heads = 2;
    c.depth = 1;
    c.lora_rank = 2;
    c.ffn_mult = 2;
    c.max_frames = 2;
    c.max_height = 2;
    c.max_width = 2;
    return c;
}

/// Deterministic double-precision example and noise for gradient checks; the
/// mask has both an edit and a non-edit cell.
struct GradCheckCase {
    ModelParams<double> params;
    TrainingExample<double> example;
    LatentGrid<double> noise;
    double t = 0.5;
};

inline GradCheckCase make_grad_check_case(const ModelConfig& cfg, std::uint64_t seed) {
    GradCheckCase gc;
    gc.params = init_params<double>(cfg, seed);
    std::mt19937_64 gen(seed + 17);
    // every tensor random so adapters and the condition branch are live
    std::normal_distribution<double> nd(0.0, 0.4);
    for (std::size_t i = 0; i < gc.params.count(); ++i)
        for (Eigen::Index k = 0; k < gc.params.tensor(i).size(); ++k) gc.params.tensor(i).data()[k] = nd(gen);
    const GridDims half{1, 2, 2, 4};
    Rng rng(seed + 31);
    gc.example.source = LatentGrid<double>(half);
    gc.example.target = LatentGrid<double>(half);
    for (auto& v : gc.example.source.values()) v = rng.uniform();
    for (auto& v : gc.example.target.values()) v = rng.uniform();
    gc.example.mask = EditMask(1, 2, 2);
    gc.example.mask.values = {1, 0, 0, 1};
    gc.example.partition = build_partition(gc.example.mask, 2);
    gc.example.instruction.task = Task::replace;
    gc.example.instruction.subject = ObjectRef{ShapeKind::circle, 2};
    gc.example.instruction.object2 = ObjectRef{ShapeKind::square, 5};
    gc.example.task = Task::replace;
    GridDims joint = half;
    joint.width = 4;
    gc.noise = LatentGrid<double>(joint);
    for (auto& v : gc.noise.values()) v = rng.gaussian();
    gc.t = 0.2 + 0.6 * rng.uniform();
    return gc;
}

inline Var<double> selected_loss(const SampleObjective<double>& o, LossSelection sel) {
    switch (sel) {
        case LossSelection::ic: return o.l_ic;
        case LossSelection::latent: return o.l_latent;
        case LossSelection::attn: return ad::add(o.l_edit, o.l_global);
        case LossSelection::total: return o.total;
    }
    return o.total;
}

inline double evaluate_selected(const GradCheckCase& gc, const ModelParams<double>& p, LossSelection sel,
                                const LossConfig& lc) {
    Tape<double> tape(false);
    auto bound = bind(tape, p);
    auto o = sample_objective(tape, bound, gc.example, gc.t, gc.noise, lc);
    return selected_loss(o, sel).item();
}

inline std::vector<Mat<double>> analytic_gradients(const GradCheckCase& gc, LossSelection sel, const LossConfig& lc) {
    Tape<double> tape;
    auto bound = bind(tape, gc.params);
    auto o = sample_objective(tape, bound, gc.example, gc.t, gc.noise, lc);
    return backward(tape, selected_loss(o, sel), bound);
}

/// Central differences against reverse-mode gradients for every parameter
/// entry. Relative error is |a - n| / max(|a|, |n|, 1e-6).
inline GradCheckReport grad_check(const ModelConfig& cfg, LossSelection sel, std::uint64_t seed,
                                  const LossConfig& lc = {}, double h = 1e-5) {
    GradCheckCase gc = make_grad_check_case(cfg, seed);
    const auto analytic = analytic_gradients(gc, sel, lc);
    GradCheckReport rep;
    rep.selection = sel;
    ModelParams<double> probe = gc.params;
    for (std::size_t i = 0; i < probe.count(); ++i) {
        double worst = 0;
        auto& w = probe.tensor(i);
        for (Eigen::Index k = 0; k < w.size(); ++k) {
            const double orig = w.data()[k];
            w.data()[k] = orig + h;
            const double up = evaluate_selected(gc, probe, sel, lc);
            w.data()[k] = orig - h;
            const double down = evaluate_selected(gc, probe, sel, lc);
            w.data()[k] = orig;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[i].data()[k];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            worst = std::max(worst, rel);
            ++rep.checked;
        }
        rep.group_error[probe.name(i)] = worst;
        rep.max_rel_error = std::max(rep.max_rel_error, worst);
    }
    return rep;
}

}  // namespace reco
