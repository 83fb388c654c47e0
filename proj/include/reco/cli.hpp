#pragma once

// Command-line front end: datagen, train, grad-check, edit, eval-proxy,
// eval-rater, report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "reco/datagen.hpp"
#include "reco/editor.hpp"
#include "reco/eval.hpp"
#include "reco/trainer.hpp"

namespace reco {

namespace fs = std::filesystem;

// ---- helpers shared with tests ------------------------------------------

/// Parses "add:red:circle", "remove:red:circle",
/// "replace:red:circle:blue:square" or "style:grayscale".
inline Instruction parse_instruction(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.empty()) throw ValidationError("empty instruction");
    auto color = [&](const std::string& s) -> std::uint8_t {
        for (std::size_t i = 0; i < kNumColors; ++i)
            if (s == kColorNames[i]) return static_cast<std::uint8_t>(i);
        throw ValidationError("unknown color '" + s + "'");
    };
    auto shape = [&](const std::string& s) {
        for (std::size_t i = 0; i < kNumShapes; ++i)
            if (s == shape_name(static_cast<ShapeKind>(i))) return static_cast<ShapeKind>(i);
        throw ValidationError("unknown shape '" + s + "'");
    };
    Instruction in;
    in.task = task_from_name(parts[0]);
    const std::size_t want = in.task == Task::style ? 2 : in.task == Task::replace ? 5 : 3;
    if (parts.size() != want)
        throw ValidationError("instruction '" + text + "' needs " + std::to_string(want - 1) + " fields after the task");
    if (in.task == Task::style) {
        bool found = false;
        for (std::size_t i = 0; i < kNumStyles; ++i)
            if (parts[1] == style_name(static_cast<StyleKind>(i))) {
                in.style = static_cast<StyleKind>(i);
                found = true;
            }
        if (!found) throw ValidationError("unknown style '" + parts[1] + "'");
    } else {
        in.subject = ObjectRef{shape(parts[2]), color(parts[1])};
        if (in.task == Task::replace) in.object2 = ObjectRef{shape(parts[4]), color(parts[3])};
    }
    in.validate();
    return in;
}

struct ProxyEvaluation {
    std::vector<ProxyMetrics> per_sample;
    ProxyMetrics mean;
};

/// Edits every pair's source with its own instruction and scores the result
/// against the pair's target.
inline ProxyEvaluation evaluate_proxy(const ModelParams<float>& params, const std::vector<SamplePair>& pairs,
                                      const SamplerConfig& sampler) {
    ProxyEvaluation ev;
    for (const auto& p : pairs) {
        const auto out = edit_video(params, p.source, p.instruction, sampler);
        ev.per_sample.push_back(proxy_metrics(p.source, out, p.target, p.pixel_mask));
    }
    ev.mean = mean_metrics(ev.per_sample);
    return ev;
}

inline void apply_ablation(LossConfig& lc, const std::string& ablation) {
    if (ablation == "none") return;
    if (ablation == "lc-") {
        lc.enable_latent = false;
    } else if (ablation == "ac-") {
        lc.enable_attn = false;
    } else {
        throw UsageError("--ablation must be none, lc- or ac-");
    }
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

// ---- dispatcher ---------------------------------------------------------

struct CliOptions {
    std::string out_dir;
    bool deterministic = false;
    int verbosity = 0;

    // datagen
    std::uint64_t data_seed = 0;
    std::size_t data_size = 64;
    std::size_t frames = 4, height = 32, width = 32;
    std::string shard_name = "shard.rcvd";

    // train
    std::vector<std::string> shards;
    std::size_t steps = 200, batch = 8, stage_boundary = 150, checkpoint_every = 0, threads = 1;
    double lr1 = 1e-4, lr2 = 2e-5, lambda1 = 1e-3, lambda2 = 1e-3, grad_clip = 1.0;
    double t_mu = 0.0, t_sigma = 1.0;
    std::uint64_t seed = 0;
    std::string ablation = "none", region_mean = "masked", resume;
    std::size_t token_dim = 64, heads = 4, depth = 4, lora_rank = 4;
    bool freeze_base = false, cond_both = false;

    // grad-check
    std::string gc_loss = "all";
    double gc_tol = 1e-4;

    // edit / eval
    std::string checkpoint, input, instruction, png_dir, shard;
    std::size_t index = 0, limit = 0, sampler_steps = 20;
    std::uint64_t sampler_seed = 0;
    bool no_rectify = false;
    std::string task_filter;

    // eval-rater
    std::string endpoint, prompt_file;
    bool mock = false;
    std::uint64_t mock_seed = 0;
    std::size_t parallel = 4;
    int retries = 2;

    // report
    std::string scorecards, categories;
};

class Cli {
public:
    Cli() : app_("reco: region-constrained in-context video editing at desk scale", "reco") { build(); }

    /// Returns the process exit code. Usage problems exit 2; runtime errors
    /// print one line "error kind=<kind> msg=<message>" and exit 1.
    int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
        out_ = &out;
        try {
            app_.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            out << app_.help();
            return 0;
        } catch (const CLI::CallForAllHelp& e) {
            out << app_.help("", CLI::AppFormatMode::All);
            return 0;
        } catch (const CLI::ParseError& e) {
            err << "error kind=usage msg=" << one_line(e.what()) << "\n" << usage_for_error();
            return 2;
        }
        try {
            execute();
            return 0;
        } catch (const UsageError& e) {
            err << "error kind=usage msg=" << one_line(e.what()) << "\n" << usage_for_error();
            return 2;
        } catch (const Error& e) {
            err << "error kind=" << e.kind() << " msg=" << one_line(e.what()) << "\n";
            return 1;
        } catch (const nlohmann::json::exception& e) {
            err << "error kind=json msg=" << one_line(e.what()) << "\n";
            return 1;
        } catch (const std::exception& e) {
            err << "error kind=internal msg=" << one_line(e.what()) << "\n";
            return 1;
        }
    }

    const CliOptions& options() const { return o_; }

private:
    static std::string one_line(std::string s) {
        for (auto& c : s)
            if (c == '\n' || c == '\r') c = ' ';
        return s;
    }

    std::string usage_for_error() const {
        for (auto* sub : app_.get_subcommands()) return sub->help();
        return app_.help();
    }

    void build() {
        app_.require_subcommand(1);
        app_.allow_config_extras(false);
        app_.set_config("--config", "", "TOML config file; keys mirror long option names", false);
        const char* env_out = std::getenv("RECO_OUT_DIR");
        o_.out_dir = env_out ? env_out : ".";
        app_.add_option("--out", o_.out_dir, "Output directory (default $RECO_OUT_DIR or .)");
        app_.add_flag("--deterministic", o_.deterministic, "Force single-threaded execution");
        app_.add_flag("-v,--verbose", o_.verbosity, "Increase verbosity");

        auto* dg = app_.add_subcommand("datagen", "Generate a synthetic paired-video shard");
        dg->add_option("--seed", o_.data_seed, "Master seed")->capture_default_str();
        dg->add_option("--size", o_.data_size, "Number of pairs")->capture_default_str();
        dg->add_option("--frames", o_.frames)->capture_default_str();
        dg->add_option("--height", o_.height)->capture_default_str();
        dg->add_option("--width", o_.width)->capture_default_str();
        dg->add_option("--name", o_.shard_name, "Shard file name inside --out")->capture_default_str();

        auto* tr = app_.add_subcommand("train", "Train a model on one or more shards");
        tr->add_option("--shard", o_.shards, "Shard path (repeatable)")->required();
        tr->add_option("--steps", o_.steps)->capture_default_str();
        tr->add_option("--batch", o_.batch)->capture_default_str();
        tr->add_option("--lr1", o_.lr1, "Stage-1 learning rate")->capture_default_str();
        tr->add_option("--lr2", o_.lr2, "Stage-2 learning rate")->capture_default_str();
        tr->add_option("--stage-boundary", o_.stage_boundary, "Last step of stage 1")->capture_default_str();
        tr->add_option("--seed", o_.seed)->capture_default_str();
        tr->add_option("--ablation", o_.ablation, "none | lc- | ac-")
            ->check(CLI::IsMember({"none", "lc-", "ac-"}))
            ->capture_default_str();
        tr->add_option("--lambda1", o_.lambda1)->capture_default_str();
        tr->add_option("--lambda2", o_.lambda2)->capture_default_str();
        tr->add_option("--region-mean", o_.region_mean, "masked | global")
            ->check(CLI::IsMember({"masked", "global"}))
            ->capture_default_str();
        tr->add_option("--grad-clip", o_.grad_clip)->capture_default_str();
        tr->add_option("--timestep-mu", o_.t_mu)->capture_default_str();
        tr->add_option("--timestep-sigma", o_.t_sigma)->capture_default_str();
        tr->add_option("--token-dim", o_.token_dim)->capture_default_str();
        tr->add_option("--heads", o_.heads)->capture_default_str();
        tr->add_option("--depth", o_.depth)->capture_default_str();
        tr->add_option("--lora-rank", o_.lora_rank)->capture_default_str();
        tr->add_flag("--cond-both-halves", o_.cond_both, "Feed the condition branch into both halves");
        tr->add_flag("--freeze-base", o_.freeze_base, "Train only adapters and the condition branch");
        tr->add_option("--checkpoint-every", o_.checkpoint_every)->capture_default_str();
        tr->add_option("--threads", o_.threads)->capture_default_str();
        tr->add_option("--resume", o_.resume, "Resume from a checkpoint");

        auto* gc = app_.add_subcommand("grad-check", "Finite-difference gradient check on a tiny model");
        gc->add_option("--loss", o_.gc_loss, "ic | latent | attn | total | all")
            ->check(CLI::IsMember({"ic", "latent", "attn", "total", "all"}))
            ->capture_default_str();
        gc->add_option("--seed", o_.seed)->capture_default_str();
        gc->add_option("--tolerance", o_.gc_tol)->capture_default_str();

        auto* ed = app_.add_subcommand("edit", "Edit a video with a trained checkpoint");
        ed->add_option("--checkpoint", o_.checkpoint)->required();
        ed->add_option("--input", o_.input, "Raw video file (array block)");
        ed->add_option("--shard", o_.shard, "Take the source and instruction from a shard sample");
        ed->add_option("--index", o_.index, "Sample index in --shard")->capture_default_str();
        ed->add_option("--instruction", o_.instruction,
                       "e.g. add:red:circle, replace:red:circle:blue:square, style:grayscale");
        ed->add_option("--steps", o_.sampler_steps, "Sampler steps")->capture_default_str();
        ed->add_option("--sampler-seed", o_.sampler_seed)->capture_default_str();
        ed->add_flag("--no-rectify", o_.no_rectify, "Disable source-half rectification");
        ed->add_option("--png", o_.png_dir, "Also write PNG frames to this directory");

        auto* ep = app_.add_subcommand("eval-proxy", "Proxy metrics of a checkpoint over a shard");
        ep->add_option("--checkpoint", o_.checkpoint)->required();
        ep->add_option("--shard", o_.shard)->required();
        ep->add_option("--limit", o_.limit, "Evaluate at most this many pairs (0 = all)")->capture_default_str();
        ep->add_option("--task", o_.task_filter, "Only pairs of this task");
        ep->add_option("--steps", o_.sampler_steps)->capture_default_str();
        ep->add_option("--sampler-seed", o_.sampler_seed)->capture_default_str();
        ep->add_flag("--no-rectify", o_.no_rectify);

        auto* er = app_.add_subcommand("eval-rater", "Rate edits of a shard with a remote or mock rater");
        er->add_option("--checkpoint", o_.checkpoint)->required();
        er->add_option("--shard", o_.shard)->required();
        er->add_option("--endpoint", o_.endpoint, "Rater URL, e.g. http://127.0.0.1:8080/rate");
        er->add_flag("--mock", o_.mock, "Use the seeded offline rater");
        er->add_option("--mock-seed", o_.mock_seed)->capture_default_str();
        er->add_option("--prompt-file", o_.prompt_file, "System prompt override");
        er->add_option("--parallel", o_.parallel, "Concurrent rater calls")->capture_default_str();
        er->add_option("--retries", o_.retries)->capture_default_str();
        er->add_option("--limit", o_.limit)->capture_default_str();
        er->add_option("--steps", o_.sampler_steps)->capture_default_str();
        er->add_option("--sampler-seed", o_.sampler_seed)->capture_default_str();

        auto* rp = app_.add_subcommand("report", "Aggregate score cards or recompute overall scores");
        rp->add_option("--scorecards", o_.scorecards, "Score cards as JSON lines");
        rp->add_option("--categories", o_.categories, "Rows {system, task, s_ea, s_vn, s_vq[, s]} as JSON lines");
    }

    fs::path out_path(const std::string& leaf) const { return fs::path(o_.out_dir) / leaf; }

    void echo_config(const std::string& sub) {
        fs::create_directories(o_.out_dir);
        std::ostringstream os;
        os << "# resolved configuration for `" << sub << "`\n";
        os << app_.config_to_str(true, false);
        write_text(out_path(sub + ".config.toml"), os.str());
    }

    SamplerConfig sampler() const {
        SamplerConfig s;
        s.steps = o_.sampler_steps;
        s.seed = o_.sampler_seed;
        s.source_rectify = !o_.no_rectify;
        return s;
    }

    void execute() {
        const auto subs = app_.get_subcommands();
        const std::string sub = subs.front()->get_name();
        if (o_.deterministic) {
            o_.threads = 1;
            o_.parallel = 1;
        }
        echo_config(sub);
        if (sub == "datagen") return datagen();
        if (sub == "train") return train();
        if (sub == "grad-check") return grad_check_cmd();
        if (sub == "edit") return edit();
        if (sub == "eval-proxy") return eval_proxy();
        if (sub == "eval-rater") return eval_rater();
        if (sub == "report") return report();
    }

    void datagen() {
        const VideoDims d{o_.frames, o_.height, o_.width};
        const auto pairs = generate_shard(o_.data_seed, o_.data_size, d);
        const auto path = out_path(o_.shard_name);
        const auto idx = write_shard(pairs, path.string(), o_.data_seed);
        nlohmann::json j = {{"shard", path.string()}, {"count", idx.count}, {"master_seed", idx.master_seed}};
        for (std::size_t k = 0; k < kNumTasks; ++k) j["histogram"][task_name(static_cast<Task>(k))] = idx.histogram[k];
        *out_ << j.dump() << '\n';
    }

    void train() {
        TrainConfig tc;
        tc.steps = o_.steps;
        tc.batch = o_.batch;
        tc.stage1_lr = o_.lr1;
        tc.stage2_lr = o_.lr2;
        tc.stage_boundary = std::min(o_.stage_boundary, o_.steps);
        tc.seed = o_.seed;
        tc.shards = o_.shards;
        tc.grad_clip = o_.grad_clip;
        tc.checkpoint_every = o_.checkpoint_every;
        tc.freeze_base = o_.freeze_base;
        tc.threads = o_.threads;
        tc.out_dir = o_.out_dir;
        tc.timesteps = {o_.t_mu, o_.t_sigma};
        tc.loss_cfg.lambda1 = o_.lambda1;
        tc.loss_cfg.lambda2 = o_.lambda2;
        tc.loss_cfg.region_mean_mode = o_.region_mean == "global" ? RegionMeanMode::global : RegionMeanMode::masked;
        apply_ablation(tc.loss_cfg, o_.ablation);
        tc.model_cfg.token_dim = o_.token_dim;
        tc.model_cfg.heads = o_.heads;
        tc.model_cfg.depth = o_.depth;
        tc.model_cfg.lora_rank = o_.lora_rank;
        tc.model_cfg.cond_both_halves = o_.cond_both;
        // positional tables sized from the first shard's latent grid
        const Shard first = read_shard(o_.shards.front());
        if (first.pairs.empty()) throw ValidationError(o_.shards.front() + ": empty shard");
        const auto& v = first.pairs.front().source;
        tc.model_cfg.max_frames = v.frames;
        tc.model_cfg.max_height = v.height / kCodecFactor;
        tc.model_cfg.max_width = v.width / kCodecFactor;
        tc.validate();
        write_text(out_path("train_config.json"), to_json(tc).dump(2) + "\n");
        std::optional<std::string> resume;
        if (!o_.resume.empty()) resume = o_.resume;
        const auto rep = reco::run(tc, resume);
        write_text(out_path("train_report.json"), rep.to_json().dump(2) + "\n");
        *out_ << rep.to_json().dump() << '\n';
    }

    void grad_check_cmd() {
        std::vector<LossSelection> sels;
        if (o_.gc_loss == "all")
            sels = {LossSelection::ic, LossSelection::latent, LossSelection::attn, LossSelection::total};
        else if (o_.gc_loss == "ic")
            sels = {LossSelection::ic};
        else if (o_.gc_loss == "latent")
            sels = {LossSelection::latent};
        else if (o_.gc_loss == "attn")
            sels = {LossSelection::attn};
        else
            sels = {LossSelection::total};
        nlohmann::json all = nlohmann::json::array();
        double worst = 0;
        for (auto s : sels) {
            const auto rep = grad_check(grad_check_config(), s, o_.seed);
            worst = std::max(worst, rep.max_rel_error);
            auto j = rep.to_json();
            if (o_.verbosity == 0) j.erase("groups");
            all.push_back(j);
        }
        write_text(out_path("grad_check.json"), all.dump(2) + "\n");
        *out_ << all.dump() << '\n';
        if (worst > o_.gc_tol)
            throw NumericError("grad-check: max relative error " + std::to_string(worst) + " exceeds " +
                               std::to_string(o_.gc_tol));
    }

    void edit() {
        PixelVideo src;
        Instruction instr;
        if (!o_.shard.empty()) {
            const Shard s = read_shard(o_.shard);
            if (o_.index >= s.pairs.size())
                throw ValidationError("--index " + std::to_string(o_.index) + " out of range for " + o_.shard);
            src = s.pairs[o_.index].source;
            instr = s.pairs[o_.index].instruction;
        } else if (!o_.input.empty()) {
            src = read_video_file(o_.input);
        } else {
            throw UsageError("edit needs --input or --shard");
        }
        if (!o_.instruction.empty()) instr = parse_instruction(o_.instruction);
        else if (o_.shard.empty()) throw UsageError("edit with --input needs --instruction");
        EditRequest req{src, instr, sampler(), o_.checkpoint};
        const auto out = edit_video(req);
        write_video_file(out, out_path("edited.rvid").string());
        if (!o_.png_dir.empty()) {
            export_png_frames(src, o_.png_dir, "source");
            export_png_frames(out, o_.png_dir, "edited");
        }
        *out_ << nlohmann::json({{"edited", out_path("edited.rvid").string()}, {"instruction", instr.text()}}).dump()
              << '\n';
    }

    std::vector<SamplePair> selected_pairs() const {
        const Shard s = read_shard(o_.shard);
        std::vector<SamplePair> pairs;
        for (const auto& p : s.pairs) {
            if (!o_.task_filter.empty() && p.task != task_from_name(o_.task_filter)) continue;
            pairs.push_back(p);
            if (o_.limit && pairs.size() >= o_.limit) break;
        }
        if (pairs.empty()) throw ValidationError("no pairs selected from " + o_.shard);
        return pairs;
    }

    void eval_proxy() {
        const Checkpoint ck = load_checkpoint(o_.checkpoint);
        const auto pairs = selected_pairs();
        const auto ev = evaluate_proxy(ck.params, pairs, sampler());
        nlohmann::json j = {{"mean", ev.mean.to_json()}, {"count", pairs.size()}, {"per_sample", nlohmann::json::array()}};
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            auto s = ev.per_sample[i].to_json();
            s["task"] = task_name(pairs[i].task);
            s["seed"] = pairs[i].seed;
            j["per_sample"].push_back(s);
        }
        write_text(out_path("proxy_metrics.json"), j.dump(2) + "\n");
        *out_ << nlohmann::json({{"mean", ev.mean.to_json()}, {"count", pairs.size()}}).dump() << '\n';
    }

    void eval_rater() {
        if (!o_.mock && o_.endpoint.empty()) throw UsageError("eval-rater needs --endpoint or --mock");
        const Checkpoint ck = load_checkpoint(o_.checkpoint);
        const auto pairs = selected_pairs();
        std::string prompt = kDefaultRaterPrompt;
        if (!o_.prompt_file.empty()) {
            const auto bytes = io::read_file(o_.prompt_file);
            prompt.assign(bytes.begin(), bytes.end());
        }
        std::vector<RaterRequest> reqs;
        for (const auto& p : pairs)
            reqs.push_back({p.task, std::to_string(p.seed), p.source, edit_video(ck.params, p.source, p.instruction, sampler())});
        RaterOptions ro;
        ro.retries = o_.retries;
        std::vector<ScoreCard> cards;
        if (o_.mock)
            cards = rate_all(reqs, [&](const RaterRequest& r) { return mock_rate(r, o_.mock_seed); }, o_.parallel);
        else
            cards = rate_all(reqs, [&](const RaterRequest& r) { return rate_remote(o_.endpoint, r, prompt, ro); },
                             o_.parallel);
        write_scorecards(cards, out_path("scorecards.jsonl").string());
        const auto table = aggregate_benchmark(cards);
        write_text(out_path("report.json"), table.to_json().dump(2) + "\n");
        write_text(out_path("report.txt"), table.to_text());
        *out_ << table.to_text();
    }

    void report() {
        if (o_.scorecards.empty() == o_.categories.empty())
            throw UsageError("report needs exactly one of --scorecards or --categories");
        if (!o_.scorecards.empty()) {
            const auto table = aggregate_benchmark(read_scorecards(o_.scorecards));
            write_text(out_path("report.json"), table.to_json().dump(2) + "\n");
            write_text(out_path("report.txt"), table.to_text());
            *out_ << table.to_text();
            return;
        }
        const auto rows = read_category_rows(o_.categories);
        nlohmann::json j = nlohmann::json::array();
        std::ostringstream txt;
        txt << std::left << std::setw(12) << "system" << std::setw(9) << "task" << std::right << std::setw(7) << "S_EA"
            << std::setw(7) << "S_VN" << std::setw(7) << "S_VQ" << std::setw(7) << "S" << '\n'
            << std::fixed << std::setprecision(2);
        for (const auto& r : rows) {
            const double s = round2(overall_from_categories(r.s_ea, r.s_vn, r.s_vq));
            nlohmann::json row = {{"system", r.system}, {"task", task_name(r.task)}, {"s_ea", r.s_ea},
                                  {"s_vn", r.s_vn},     {"s_vq", r.s_vq},            {"s", s}};
            if (r.s_reported) row["matches_reported"] = round2(*r.s_reported) == s;
            j.push_back(row);
            txt << std::left << std::setw(12) << r.system << std::setw(9) << task_name(r.task) << std::right
                << std::setw(7) << r.s_ea << std::setw(7) << r.s_vn << std::setw(7) << r.s_vq << std::setw(7) << s
                << '\n';
        }
        write_text(out_path("report.json"), j.dump(2) + "\n");
        write_text(out_path("report.txt"), txt.str());
        *out_ << txt.str();
    }

    CLI::App app_;
    CliOptions o_;
    std::ostream* out_ = &std::cout;
};

inline int dispatch(int argc, char** argv) {
    Cli cli;
    return cli.run(argc, argv);
}

}  // namespace reco
