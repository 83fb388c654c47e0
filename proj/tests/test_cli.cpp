#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "reco/cli.hpp"

using namespace reco;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "reco");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    Cli cli;
    const int code = cli.run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& leaf) {
    auto d = fs::temp_directory_path() / ("reco_test_cli_" + leaf);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
    std::ifstream in(p);
    std::vector<nlohmann::json> out;
    for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
    return out;
}

// tiny datagen + train arguments shared by several tests
std::vector<std::string> small_train(const fs::path& shard, const fs::path& out) {
    return {"--out", out.string(), "--deterministic", "train", "--shard", shard.string(), "--steps", "4", "--batch", "2",
            "--token-dim", "8", "--heads", "2", "--depth", "1", "--lora-rank", "2", "--seed", "3"};
}

fs::path make_shard(const fs::path& dir) {
    auto r = run_cli({"--out", dir.string(), "datagen", "--seed", "7", "--size", "8", "--frames", "2", "--height", "16",
                      "--width", "16"});
    EXPECT_EQ(r.code, 0) << r.err;
    return dir / "shard.rcvd";
}

}  // namespace

TEST(ParseInstruction, Forms) {
    auto a = parse_instruction("add:red:circle");
    EXPECT_EQ(a.task, Task::add);
    ASSERT_TRUE(a.subject);
    EXPECT_EQ(a.subject->shape, ShapeKind::circle);
    EXPECT_EQ(a.subject->color, 0);
    auto r = parse_instruction("replace:red:circle:blue:square");
    EXPECT_EQ(r.object2->shape, ShapeKind::square);
    EXPECT_EQ(parse_instruction("style:grayscale").style, StyleKind::grayscale);
    EXPECT_EQ(parse_instruction("style:hue-rotate").style, StyleKind::hue_rotate);
    EXPECT_THROW(parse_instruction("add:red"), ValidationError);
    EXPECT_THROW(parse_instruction("add:mauve:circle"), ValidationError);
    EXPECT_THROW(parse_instruction("style:blurry"), ValidationError);
    EXPECT_THROW(parse_instruction("rotate:red:circle"), Error);
}

TEST(Ablation, Routing) {
    LossConfig lc;
    apply_ablation(lc, "none");
    EXPECT_TRUE(lc.enable_latent && lc.enable_attn);
    apply_ablation(lc, "lc-");
    EXPECT_FALSE(lc.enable_latent);
    EXPECT_TRUE(lc.enable_attn);
    LossConfig ac;
    apply_ablation(ac, "ac-");
    EXPECT_TRUE(ac.enable_latent);
    EXPECT_FALSE(ac.enable_attn);
    EXPECT_THROW(apply_ablation(ac, "both"), UsageError);
}

TEST(Cli, DatagenIsBitIdenticalAndEchoesConfig) {
    const auto a = fresh_dir("dg_a"), b = fresh_dir("dg_b");
    for (const auto& d : {a, b}) {
        auto r = run_cli({"--out", d.string(), "datagen", "--seed", "7", "--size", "64"});
        ASSERT_EQ(r.code, 0) << r.err;
        auto j = nlohmann::json::parse(r.out);
        EXPECT_EQ(j["count"], 64);
        EXPECT_EQ(j["histogram"]["style"], 16);
    }
    EXPECT_EQ(slurp(a / "shard.rcvd"), slurp(b / "shard.rcvd"));
    const auto echo = slurp(a / "datagen.config.toml");
    EXPECT_NE(echo.find("seed=7"), std::string::npos) << echo;
    EXPECT_NE(echo.find("size=64"), std::string::npos) << echo;
}

TEST(Cli, TrainAblationExcludesLatentTerm) {
    const auto dir = fresh_dir("lc");
    const auto shard = make_shard(dir);
    auto args = small_train(shard, dir / "run");
    args.insert(args.end(), {"--ablation", "lc-", "--lambda1", "10"});
    auto r = run_cli(args);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto log = read_jsonl(dir / "run" / "train_log.jsonl");
    ASSERT_EQ(log.size(), 4u);
    for (const auto& l : log) {
        const double expect = l["l_ic"].get<double>() + 1e-3 * l["l_attn"].get<double>();
        EXPECT_NEAR(l["total"].get<double>(), expect, 1e-12 * std::abs(expect) + 1e-15);
        EXPECT_NE(l["l_latent"].get<double>(), 0.0);
    }
    auto cfg = nlohmann::json::parse(slurp(dir / "run" / "train_config.json"));
    EXPECT_EQ(cfg["loss"]["enable_latent"], false);
    EXPECT_TRUE(fs::exists(dir / "run" / "train.config.toml"));
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint_final.rcck"));
    EXPECT_TRUE(fs::exists(dir / "run" / "train_report.json"));
}

TEST(Cli, DeterministicTrainRunsMatch) {
    const auto dir = fresh_dir("det");
    const auto shard = make_shard(dir);
    auto args_b = small_train(shard, dir / "b");
    ASSERT_EQ(run_cli(small_train(shard, dir / "a")).code, 0);
    ASSERT_EQ(run_cli(args_b).code, 0);
    EXPECT_EQ(slurp(dir / "a" / "train_log.jsonl"), slurp(dir / "b" / "train_log.jsonl"));
    // the embedded config records each run's own --out, so compare weights
    const auto ca = load_checkpoint((dir / "a" / "checkpoint_final.rcck").string());
    const auto cb = load_checkpoint((dir / "b" / "checkpoint_final.rcck").string());
    EXPECT_TRUE(ca.params == cb.params);
    EXPECT_EQ(ca.rng_state, cb.rng_state);
}

TEST(Cli, EditEvalAndReportPipeline) {
    const auto dir = fresh_dir("pipe");
    const auto shard = make_shard(dir);
    ASSERT_EQ(run_cli(small_train(shard, dir / "run")).code, 0);
    const auto ck = (dir / "run" / "checkpoint_final.rcck").string();

    auto e = run_cli({"--out", (dir / "edit").string(), "edit", "--checkpoint", ck, "--shard", shard.string(), "--index",
                      "2", "--steps", "3", "--png", (dir / "png").string()});
    ASSERT_EQ(e.code, 0) << e.err;
    auto edited = read_video_file((dir / "edit" / "edited.rvid").string());
    EXPECT_EQ(edited.frames, 2u);
    EXPECT_TRUE(fs::exists(dir / "png" / "edited_001.png"));

    auto e2 = run_cli({"--out", (dir / "edit2").string(), "edit", "--checkpoint", ck, "--input",
                       (dir / "edit" / "edited.rvid").string(), "--instruction", "style:invert", "--steps", "2"});
    ASSERT_EQ(e2.code, 0) << e2.err;

    auto p = run_cli({"--out", (dir / "proxy").string(), "eval-proxy", "--checkpoint", ck, "--shard", shard.string(),
                      "--task", "replace", "--steps", "2"});
    ASSERT_EQ(p.code, 0) << p.err;
    auto pj = nlohmann::json::parse(slurp(dir / "proxy" / "proxy_metrics.json"));
    EXPECT_EQ(pj["count"], 2);
    for (const auto& s : pj["per_sample"]) EXPECT_EQ(s["task"], "replace");

    auto rr = run_cli({"--out", (dir / "rater").string(), "--deterministic", "eval-rater", "--checkpoint", ck, "--shard",
                       shard.string(), "--mock", "--mock-seed", "4", "--steps", "2"});
    ASSERT_EQ(rr.code, 0) << rr.err;
    EXPECT_EQ(read_scorecards((dir / "rater" / "scorecards.jsonl").string()).size(), 8u);

    auto rep = run_cli({"--out", (dir / "report").string(), "report", "--scorecards",
                        (dir / "rater" / "scorecards.jsonl").string()});
    ASSERT_EQ(rep.code, 0) << rep.err;
    EXPECT_EQ(slurp(dir / "report" / "report.json"), slurp(dir / "rater" / "report.json"));
}

TEST(Cli, ReportReproducesPublishedOverallScores) {
    const auto dir = fresh_dir("report");
    auto r = run_cli({"--out", dir.string(), "report", "--categories",
                      std::string(RECO_TEST_DATA) + "/table1_categories.jsonl"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(slurp(dir / "report.json"));
    ASSERT_EQ(j.size(), 15u);
    for (const auto& row : j) EXPECT_TRUE(row["matches_reported"].get<bool>()) << row.dump();
    EXPECT_NE(r.out.find("8.23"), std::string::npos);
    EXPECT_NE(r.out.find("9.17"), std::string::npos);
}

TEST(Cli, GradCheckSubcommand) {
    const auto dir = fresh_dir("gc");
    auto r = run_cli({"--out", dir.string(), "grad-check", "--loss", "attn"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(slurp(dir / "grad_check.json"));
    ASSERT_EQ(j.size(), 1u);
    EXPECT_LE(j[0]["max_rel_error"].get<double>(), 1e-4);
    auto strict = run_cli({"--out", dir.string(), "grad-check", "--loss", "ic", "--tolerance", "0"});
    EXPECT_EQ(strict.code, 1);
    EXPECT_EQ(strict.err.rfind("error kind=numeric msg=", 0), 0u) << strict.err;
}

TEST(Cli, UsageErrorsExitTwo) {
    const auto dir = fresh_dir("usage");
    auto a = run_cli({"--out", dir.string(), "datagen", "--bogus", "1"});
    EXPECT_EQ(a.code, 2);
    EXPECT_EQ(a.err.rfind("error kind=usage msg=", 0), 0u) << a.err;
    EXPECT_NE(a.err.find("--size"), std::string::npos);
    EXPECT_EQ(run_cli({"--out", dir.string(), "frobnicate"}).code, 2);
    EXPECT_EQ(run_cli({}).code, 2);
    EXPECT_EQ(run_cli({"--out", dir.string(), "train"}).code, 2);  // --shard is required
    EXPECT_EQ(run_cli({"--out", dir.string(), "report"}).code, 2);
    auto shard = make_shard(dir);
    auto bad = small_train(shard, dir / "t");
    bad.insert(bad.end(), {"--ablation", "everything"});
    EXPECT_EQ(run_cli(bad).code, 2);
}

TEST(Cli, ConfigFileKeysAreChecked) {
    const auto dir = fresh_dir("cfg");
    const auto good = dir / "good.toml";
    std::ofstream(good) << "[datagen]\nseed=11\nsize=8\n";
    auto r = run_cli({"--out", dir.string(), "--config", good.string(), "datagen", "--height", "16", "--width", "16"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(nlohmann::json::parse(r.out)["count"], 8);
    EXPECT_EQ(read_shard((dir / "shard.rcvd").string()).index.master_seed, 11u);

    const auto bad = dir / "bad.toml";
    std::ofstream(bad) << "[datagen]\nseed=11\nno_such_key=3\n";
    auto b = run_cli({"--out", dir.string(), "--config", bad.string(), "datagen"});
    EXPECT_EQ(b.code, 2);
    EXPECT_EQ(b.err.rfind("error kind=usage", 0), 0u) << b.err;
}

TEST(Cli, EchoedConfigReplays) {
    const auto dir = fresh_dir("replay");
    ASSERT_EQ(run_cli({"--out", dir.string(), "datagen", "--seed", "5", "--size", "4", "--height", "16", "--width", "16"}).code,
              0);
    const auto first = slurp(dir / "shard.rcvd");
    const auto echo = dir / "echo.toml";
    fs::copy_file(dir / "datagen.config.toml", echo);
    fs::remove(dir / "shard.rcvd");
    auto r = run_cli({"--config", echo.string(), "datagen"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(dir / "shard.rcvd"), first);
}

TEST(Cli, RuntimeErrorsAreOneMachineLine) {
    const auto dir = fresh_dir("runtime");
    auto r = run_cli({"--out", dir.string(), "edit", "--checkpoint", (dir / "missing.rcck").string(), "--input",
                      (dir / "missing.rvid").string(), "--instruction", "style:sepia"});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error kind=io msg=", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
    const auto junk = dir / "junk.rcvd";
    std::ofstream(junk) << "JUNKJUNKJUNK";
    auto t = run_cli(small_train(junk, dir / "t"));
    EXPECT_EQ(t.code, 1);
    EXPECT_EQ(t.err.rfind("error kind=bad_magic msg=", 0), 0u) << t.err;
}
