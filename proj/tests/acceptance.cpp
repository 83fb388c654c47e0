// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "reco/cli.hpp"

using namespace reco;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;  // 0: no runtime bound
    std::function<Outcome()> check;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

fs::path scratch(const std::string& leaf) {
    auto d = fs::temp_directory_path() / ("reco_acceptance_" + leaf);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "reco");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    Cli cli;
    const int code = cli.run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) std::cerr << err.str();
    return code;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// ---- 1 ------------------------------------------------------------------

Outcome table_aggregation() {
    const auto rows = read_category_rows(std::string(RECO_TEST_DATA) + "/table1_categories.jsonl");
    std::size_t ok = 0;
    std::string bad;
    for (const auto& r : rows) {
        const double s = round2(overall_from_categories(r.s_ea, r.s_vn, r.s_vq));
        if (r.s_reported && s == *r.s_reported)
            ++ok;
        else
            bad += " " + r.system + "/" + task_name(r.task);
    }
    // the published table has 15 system/task rows
    const bool pass = rows.size() == 15 && ok == rows.size();
    return {pass, std::to_string(ok) + "/" + std::to_string(rows.size()) + " rows reproduce S" +
                      (bad.empty() ? "" : "; mismatched:" + bad)};
}

// ---- 2 ------------------------------------------------------------------

Outcome flow_identities() {
    Rng rng(2024);
    double worst_one = 0;
    const GridDims d{2, 3, 4, 4};
    auto random_grid = [&](const GridDims& g) {
        LatentGrid<double> x(g);
        for (auto& v : x.values()) v = rng.gaussian();
        return x;
    };
    for (int i = 0; i < 1000; ++i) {
        auto x1 = random_grid(d), x0 = random_grid(d);
        const double t = rng.uniform();
        auto xh = one_step_denoise(noisy_interpolate(x1, x0, t), velocity_target(x1, x0), t);
        for (std::size_t k = 0; k < xh.size(); ++k) worst_one = std::max(worst_one, std::abs(xh.values()[k] - x1.values()[k]));
    }
    double worst_euler = 0;
    const GridDims half{2, 3, 4, 4};
    for (std::size_t steps : {1u, 4u, 20u})
        for (bool rectify : {true, false}) {
            auto src = random_grid(half), tgt = random_grid(half);
            const auto x1 = concat_widthwise(src, tgt);
            const auto x0 = make_initial_noise<double>(half, steps * 10 + rectify);
            const auto v = velocity_target(x1.grid, x0.grid);
            auto oracle = [&](const InContextLatent<double>&, double) { return v; };
            auto out = euler_sample(oracle, src, x0, SamplerConfig{steps, rectify, 0});
            for (std::size_t k = 0; k < out.grid.size(); ++k)
                worst_euler = std::max(worst_euler, std::abs(out.grid.values()[k] - x1.grid.values()[k]));
        }
    return {worst_one <= 1e-12 && worst_euler <= 1e-6,
            "one-step max err " + fmt("%.2e", worst_one) + " (<= 1e-12), euler max err " + fmt("%.2e", worst_euler) +
                " (<= 1e-6)"};
}

// ---- 3 ------------------------------------------------------------------

Outcome gradient_oracle() {
    std::string detail;
    bool pass = true;
    for (auto sel : {LossSelection::ic, LossSelection::latent, LossSelection::attn, LossSelection::total}) {
        const auto rep = grad_check(grad_check_config(), sel, 1);
        pass = pass && rep.max_rel_error <= 1e-4;
        detail += std::string(detail.empty() ? "" : ", ") + selection_name(sel) + " " + fmt("%.2e", rep.max_rel_error);
    }
    return {pass, "max rel error " + detail + " (<= 1e-4)"};
}

// ---- 4 ------------------------------------------------------------------

Outcome attention_zero() {
    std::mt19937_64 g(4);
    std::size_t zero = 0;
    for (int trial = 0; trial < 50; ++trial) {
        EditMask m(1 + g() % 2, 1 + g() % 4, 1 + g() % 8);
        for (auto& v : m.values) v = static_cast<std::uint8_t>(g() % 2);
        const auto p = build_partition(m, m.width);
        AttentionTrace<double> tr{2, 2, {}};
        for (int k = 0; k < 4; ++k)
            tr.maps.push_back(Mat<double>::Constant(static_cast<Eigen::Index>(p.tokens), static_cast<Eigen::Index>(p.tokens),
                                                    1.0 / static_cast<double>(p.tokens)));
        if (attention_edit_loss(tr, p) == 0.0 && attention_global_loss(tr, p) == 0.0) ++zero;
    }
    ModelConfig cfg;
    cfg.token_dim = 16;
    cfg.heads = 4;
    cfg.depth = 2;
    cfg.max_frames = 2;
    cfg.max_height = 4;
    cfg.max_width = 4;
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto params = init_params<float>(cfg, seed);
        Rng rng(seed + 100);
        const GridDims half{2, 3, 4, 4};
        LatentGrid<float> src(half), tgt(half);
        for (auto& v : src.values()) v = static_cast<float>(rng.gaussian());
        for (auto& v : tgt.values()) v = static_cast<float>(rng.gaussian());
        const auto pair = generate_pair(static_cast<Task>(seed % 4), seed, VideoDims{2, 16, 16});
        auto out = forward(params, concat_widthwise(src, tgt), src, pair.instruction, rng.uniform(), true);
        for (const auto& map : out.trace->maps)
            for (Eigen::Index r = 0; r < map.rows(); ++r)
                worst = std::max(worst, std::abs(static_cast<double>(map.row(r).sum()) - 1.0));
    }
    return {zero == 50 && worst <= 1e-5,
            std::to_string(zero) + "/50 partitions give exact zeros; worst softmax row-sum error " + fmt("%.2e", worst)};
}

// ---- 5 ------------------------------------------------------------------

bool partition_identities(const EditMask& m) {
    const auto p = build_partition(m, m.width);
    const std::size_t W = m.width, H = m.height;
    std::set<std::size_t> a1(p.a1.begin(), p.a1.end()), a2(p.a2.begin(), p.a2.end()), a3(p.a3.begin(), p.a3.end()),
        q(p.q.begin(), p.q.end());
    if (a1.size() != p.a1.size() || a2.size() != p.a2.size() || q.size() != p.q.size()) return false;
    if (p.tokens != m.frames * H * 2 * W) return false;
    for (std::size_t f = 0; f < m.frames; ++f)
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t c = 0; c < 2 * W; ++c) {
                const std::size_t id = (f * H + r) * 2 * W + c;
                const bool source = c < W;
                const bool edit = m.at(f, r, source ? c : c - W) != 0;
                const bool in1 = a1.count(id), in2 = a2.count(id), in3 = a3.count(id), inq = q.count(id);
                if (source) {
                    // a1 and a2 partition the source tokens
                    if (in1 == in2 || in1 != edit || in3 || inq) return false;
                } else {
                    if (in1 || in2 || !in3 || inq != edit) return false;
                }
            }
    return true;
}

Outcome mask_and_partition() {
    std::mt19937_64 g(5);
    std::size_t sound = 0;
    for (int i = 0; i < 100; ++i) {
        const auto task = static_cast<Task>(g() % 3);
        const auto p = generate_pair(task, g(), VideoDims{4, 32, 32});
        bool ok = true;
        for (std::size_t cell = 0; cell < p.pixel_mask.cells() && ok; ++cell)
            for (std::size_t ch = 0; ch < 3; ++ch)
                if (p.source.values[cell * 3 + ch] != p.target.values[cell * 3 + ch] && !p.pixel_mask.values[cell]) ok = false;
        sound += ok;
    }
    std::size_t grids = 0, masks = 0, failures = 0;
    for (std::size_t f = 1; f <= 2; ++f)
        for (std::size_t h = 1; h <= 4; ++h)
            for (std::size_t w = 1; w <= 8; ++w) {
                ++grids;
                const std::size_t cells = f * h * w;
                EditMask m(f, h, w);
                if (cells <= 12) {
                    for (std::uint64_t bits = 0; bits < (1ull << cells); ++bits) {
                        for (std::size_t k = 0; k < cells; ++k) m.values[k] = (bits >> k) & 1u;
                        ++masks;
                        failures += !partition_identities(m);
                    }
                } else {
                    for (int t = 0; t < 300; ++t) {
                        for (auto& v : m.values) v = static_cast<std::uint8_t>(g() % 2);
                        if (t == 0) std::fill(m.values.begin(), m.values.end(), 0);
                        if (t == 1) std::fill(m.values.begin(), m.values.end(), 1);
                        ++masks;
                        failures += !partition_identities(m);
                    }
                }
            }
    return {sound == 100 && failures == 0, std::to_string(sound) + "/100 pixel masks sound; " + std::to_string(masks) +
                                               " masks over " + std::to_string(grids) + " grids, " +
                                               std::to_string(failures) + " partition violations"};
}

// ---- 6 ------------------------------------------------------------------

Outcome determinism() {
    const auto dir = scratch("determinism");
    bool ok = true;
    for (const char* sub : {"d1", "d2"})
        ok = ok && run_cli({"--out", (dir / sub).string(), "--deterministic", "datagen", "--seed", "7", "--size", "64"}) == 0;
    const bool shards_equal = ok && slurp(dir / "d1" / "shard.rcvd") == slurp(dir / "d2" / "shard.rcvd");
    const auto shard = dir / "small.rcvd";
    write_shard(generate_shard(9, 32, VideoDims{2, 16, 16}), shard.string(), 9);
    for (const char* sub : {"t1", "t2"})
        ok = ok && run_cli({"--out", (dir / sub).string(), "--deterministic", "train", "--shard", shard.string(), "--steps",
                            "200", "--batch", "4", "--token-dim", "16", "--heads", "2", "--depth", "2", "--lora-rank",
                            "2", "--seed", "5"}) == 0;
    const auto l1 = slurp(dir / "t1" / "train_log.jsonl"), l2 = slurp(dir / "t2" / "train_log.jsonl");
    const auto lines = static_cast<std::size_t>(std::count(l1.begin(), l1.end(), '\n'));
    const bool logs_equal = ok && !l1.empty() && l1 == l2 && lines == 200;
    return {shards_equal && logs_equal, std::string("shards ") + (shards_equal ? "identical" : "differ") +
                                            ", 200-step logs " + (logs_equal ? "identical" : "differ") + " (" +
                                            std::to_string(lines) + " lines)"};
}

// ---- 7 ------------------------------------------------------------------

struct ToyRun {
    double first10_ic = 0, final_ic = 0;
    ProxyMetrics trained, untrained;
    ModelParams<float> params;
};

TrainConfig toy_config(std::uint64_t seed, bool latent_constraint) {
    TrainConfig c;
    c.steps = 2000;
    c.batch = 8;
    c.stage_boundary = 1500;
    c.seed = seed;
    c.model_cfg.token_dim = 32;
    c.model_cfg.heads = 2;
    c.model_cfg.depth = 2;
    c.model_cfg.lora_rank = 4;
    c.model_cfg.max_frames = 4;
    c.model_cfg.max_height = 8;
    c.model_cfg.max_width = 8;
    if (!latent_constraint) apply_ablation(c.loss_cfg, "lc-");
    return c;
}

ToyRun toy_run(std::uint64_t seed, bool latent_constraint, const std::vector<TrainingExample<float>>& data,
               const std::vector<SamplePair>& held_out) {
    const auto cfg = toy_config(seed, latent_constraint);
    Trainer tr(cfg, data);
    ToyRun r;
    const SamplerConfig sampler;
    r.untrained = evaluate_proxy(tr.params(), held_out, sampler).mean;
    for (std::size_t s = 1; s <= cfg.steps; ++s) {
        const auto log = tr.step();
        if (s <= 10) r.first10_ic += log.losses.l_ic / 10.0;
        r.final_ic = log.losses.l_ic;
        if (s % 500 == 0)
            std::cerr << "  seed " << seed << (latent_constraint ? " full" : " lc-") << " step " << s
                      << " l_ic " << log.losses.l_ic << "\n";
    }
    r.params = tr.params();
    r.trained = evaluate_proxy(r.params, held_out, sampler).mean;
    return r;
}

double channel_spread(const PixelVideo& v) {
    double s = 0;
    for (std::size_t i = 0; i < v.values.size(); i += 3)
        s += std::max({v.values[i], v.values[i + 1], v.values[i + 2]}) - std::min({v.values[i], v.values[i + 1], v.values[i + 2]});
    return s / static_cast<double>(v.values.size() / 3);
}

Outcome toy_training() {
    const VideoDims dims{4, 32, 32};
    std::size_t seeds_passed = 0;
    std::string detail;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        std::vector<TrainingExample<float>> data;
        for (const auto& p : generate_shard(seed, 256, dims)) data.push_back(prepare_example<float>(p));
        std::vector<SamplePair> held_out;
        for (const auto& p : generate_shard(seed + 1000, 64, dims))
            if (p.task == Task::replace) held_out.push_back(p);
        const auto full = toy_run(seed, true, data, held_out);
        const auto lcm = toy_run(seed, false, data, held_out);
        const bool a = full.final_ic < 0.5 * full.first10_ic;
        const bool b = full.trained.gt_compliance <= 0.7 * full.untrained.gt_compliance;
        const bool c = full.trained.background_error <= lcm.trained.background_error;
        seeds_passed += a && b && c;
        detail += "\n    seed " + std::to_string(seed) + ": (a) l_ic " + fmt("%.4f", full.final_ic) + " vs 0.5*" +
                  fmt("%.4f", full.first10_ic) + (a ? " ok" : " FAIL") + "; (b) gt_compliance " +
                  fmt("%.5f", full.trained.gt_compliance) + " vs untrained " + fmt("%.5f", full.untrained.gt_compliance) +
                  " (" + fmt("%.1f", 100.0 * (1.0 - full.trained.gt_compliance / full.untrained.gt_compliance)) +
                  "% better)" + (b ? " ok" : " FAIL") + "; (c) background_error full " +
                  fmt("%.5f", full.trained.background_error) + " vs lc- " + fmt("%.5f", lcm.trained.background_error) +
                  (c ? " ok" : " FAIL");
        if (seed == 1) {
            // informational: a grayscale edit should reduce channel spread
            const auto src = generate_pair(Task::style, derive_seed(seed + 1000, 3), dims).source;
            const auto out = edit_video(full.params, src, parse_instruction("style:grayscale"), SamplerConfig{});
            detail += "\n    info: grayscale edit channel spread " + fmt("%.4f", channel_spread(out)) + " vs source " +
                      fmt("%.4f", channel_spread(src));
        }
    }
    return {seeds_passed >= 2, std::to_string(seeds_passed) + "/3 seeds pass all of (a)(b)(c)" + detail};
}

// ---- 8 ------------------------------------------------------------------

Outcome persistence() {
    const auto pairs = generate_shard(11, 12, VideoDims{2, 16, 16});
    const auto bytes = encode_shard(pairs, 11);
    const auto back = decode_shard(bytes);
    const bool shard_ok = back.pairs == pairs && encode_shard(back.pairs, 11) == bytes;

    std::vector<TrainingExample<float>> data;
    for (const auto& p : pairs) data.push_back(prepare_example<float>(p));
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch = 3;
    cfg.stage_boundary = 10;
    cfg.seed = 8;
    cfg.model_cfg.token_dim = 16;
    cfg.model_cfg.heads = 2;
    cfg.model_cfg.depth = 2;
    cfg.model_cfg.lora_rank = 2;
    cfg.model_cfg.max_frames = 2;
    cfg.model_cfg.max_height = 4;
    cfg.model_cfg.max_width = 4;
    Trainer whole(cfg, data), first(cfg, data);
    std::vector<LossBreakdown> want, got;
    for (int i = 0; i < 20; ++i) want.push_back(whole.step().losses);
    for (int i = 0; i < 10; ++i) got.push_back(first.step().losses);
    const auto ck_bytes = encode_checkpoint(first.checkpoint());
    const auto ck = decode_checkpoint(ck_bytes);
    const bool ck_ok = ck.params == first.params() && encode_checkpoint(ck) == ck_bytes;
    Trainer resumed(ck, data);
    for (int i = 0; i < 10; ++i) got.push_back(resumed.step().losses);
    const bool resume_ok = got == want && resumed.params() == whole.params();
    return {shard_ok && ck_ok && resume_ok, std::string("shard round trip ") + (shard_ok ? "exact" : "differs") +
                                                ", checkpoint round trip " + (ck_ok ? "exact" : "differs") +
                                                ", resume at step 10 of 20 " + (resume_ok ? "bitwise equal" : "differs")};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "table aggregation", 1.0, table_aggregation},
        {2, "flow identities", 10.0, flow_identities},
        {3, "gradient oracle", 300.0, gradient_oracle},
        {4, "attention-loss zero and softmax rows", 0, attention_zero},
        {5, "mask and partition oracle", 0, mask_and_partition},
        {6, "determinism", 0, determinism},
        {7, "toy training direction", 7200.0, toy_training},
        {8, "persistence", 0, persistence},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string timing = fmt("%.2fs", secs);
        if (c.budget_seconds > 0) {
            timing += " of " + fmt("%.0fs", c.budget_seconds) + " budget";
            if (secs > c.budget_seconds) {
                o.pass = false;
                o.detail += "; over runtime budget";
            }
        }
        failed += !o.pass;
        std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << ": " << o.detail
                  << " [" << timing << "]" << std::endl;
    }
    std::cout << (failed ? "acceptance FAILED: " + std::to_string(failed) + " criteria" : std::string("acceptance PASSED"))
              << std::endl;
    return failed ? 1 : 0;
}
