#include <random>
#include <set>

#include <gtest/gtest.h>

#include "reco/flow.hpp"
#include "reco/model.hpp"

using namespace reco;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.token_dim = 16;
    c.heads = 2;
    c.depth = 2;
    c.lora_rank = 3;
    c.max_frames = 2;
    c.max_height = 3;
    c.max_width = 3;
    return c;
}

template <class T>
LatentGrid<T> random_grid(Rng& rng, GridDims d) {
    LatentGrid<T> x(d);
    for (auto& v : x.values()) v = static_cast<T>(rng.gaussian());
    return x;
}

Instruction sample_instruction() {
    Instruction in;
    in.task = Task::replace;
    in.subject = ObjectRef{ShapeKind::circle, 1};
    in.object2 = ObjectRef{ShapeKind::triangle, 4};
    in.trajectory = 5;
    return in;
}

template <class T>
void randomize(ModelParams<T>& p, std::uint64_t seed, double sd) {
    std::mt19937_64 g(seed);
    std::normal_distribution<double> nd(0, sd);
    for (std::size_t i = 0; i < p.count(); ++i)
        for (Eigen::Index k = 0; k < p.tensor(i).size(); ++k) p.tensor(i).data()[k] = static_cast<T>(nd(g));
}

}  // namespace

TEST(ModelConfig, Validation) {
    ModelConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    c.heads = 3;
    EXPECT_THROW(c.validate(), ValidationError);
    c = small_config();
    c.lora_rank = 17;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_THROW(init_params<float>(c, 1), ValidationError);
}

TEST(InitParams, DeterministicZeroConditionAndNoOpAdapters) {
    auto a = init_params<float>(small_config(), 9), b = init_params<float>(small_config(), 9);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == init_params<float>(small_config(), 10));
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(a[block_name(l, "cond")].cwiseAbs().maxCoeff(), 0.f);
        for (const char* proj : kAdaptedProjections)
            EXPECT_EQ(a[block_name(l, proj) + ".lora_b"].cwiseAbs().maxCoeff(), 0.f);
    }
    EXPECT_TRUE(a.all_finite());
}

TEST(InitParams, RankZeroHasNoAdaptersAndAdapterCountIs2rd) {
    ModelConfig c = small_config();
    c.lora_rank = 0;
    auto p0 = init_params<float>(c, 1);
    for (const auto& n : p0.names()) EXPECT_EQ(n.find("lora"), std::string::npos);
    auto p3 = init_params<float>(small_config(), 1);
    for (const char* proj : kAdaptedProjections) {
        const auto base = block_name(0, proj);
        EXPECT_EQ(p3[base + ".lora_a"].size() + p3[base + ".lora_b"].size(), 2 * 3 * 16);
    }
    EXPECT_EQ(p3.scalar_count() - p0.scalar_count(), 2u * 8u * 2u * 3u * 16u);
}

TEST(Instruction, EncodingIsInjectiveOverTheWholeSpace) {
    std::set<std::array<std::uint32_t, kInstructionLength>> seen;
    std::size_t total = 0;
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t s = 0; s < kNumShapes; ++s)
            for (std::uint8_t col = 0; col < kNumColors; ++col)
                for (std::size_t s2 = 0; s2 < kNumShapes; ++s2)
                    for (std::uint8_t c2 = 0; c2 < kNumColors; ++c2)
                        for (int traj = -1; traj < static_cast<int>(kNumTrajectories); ++traj) {
                            Instruction in;
                            in.task = static_cast<Task>(t);
                            in.subject = ObjectRef{static_cast<ShapeKind>(s), col};
                            if (in.task == Task::replace) in.object2 = ObjectRef{static_cast<ShapeKind>(s2), c2};
                            else if (s2 || c2) continue;
                            if (traj >= 0) in.trajectory = static_cast<std::uint8_t>(traj);
                            seen.insert(encode_instruction(in));
                            ++total;
                        }
    for (std::size_t st = 0; st < kNumStyles; ++st) {
        Instruction in;
        in.task = Task::style;
        in.style = static_cast<StyleKind>(st);
        seen.insert(encode_instruction(in));
        ++total;
    }
    EXPECT_EQ(seen.size(), total);
    for (const auto& ids : seen)
        for (auto id : ids) EXPECT_LT(id, vocab::size);
}

TEST(Instruction, StyleLayoutDeterminismAndVocabErrors) {
    Instruction in;
    in.task = Task::style;
    in.style = StyleKind::sepia;
    auto ids = encode_instruction(in);
    EXPECT_EQ(ids[1], vocab::pad);
    EXPECT_EQ(ids[2], vocab::pad);
    EXPECT_EQ(ids[3], vocab::pad);
    EXPECT_EQ(ids[4], vocab::pad);
    EXPECT_EQ(ids[5], vocab::style0 + 2);
    EXPECT_EQ(ids, encode_instruction(in));
    Instruction bad = sample_instruction();
    bad.subject->color = 99;
    EXPECT_THROW(encode_instruction(bad), ValidationError);
    Instruction no_obj2 = sample_instruction();
    no_obj2.object2.reset();
    EXPECT_THROW(encode_instruction(no_obj2), ValidationError);
    Instruction no_style;
    no_style.task = Task::style;
    EXPECT_THROW(encode_instruction(no_style), ValidationError);
}

TEST(Forward, ShapeContractAndSoftmaxRows) {
    auto p = init_params<double>(small_config(), 2);
    randomize(p, 3, 0.3);
    Rng rng(4);
    for (GridDims half : {GridDims{1, 1, 1, 4}, GridDims{2, 3, 3, 4}, GridDims{1, 2, 3, 4}}) {
        auto src = random_grid<double>(rng, half), tgt = random_grid<double>(rng, half);
        auto xt = concat_widthwise(src, tgt);
        auto out = forward(p, xt, src, sample_instruction(), 0.3, true);
        EXPECT_EQ(out.velocity.dims(), xt.grid.dims());
        ASSERT_TRUE(out.trace.has_value());
        EXPECT_EQ(out.trace->maps.size(), 2u * 2u);
        for (const auto& m : out.trace->maps) {
            EXPECT_EQ(m.rows(), static_cast<Eigen::Index>(half.cells() * 2));
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                EXPECT_NEAR(m.row(r).sum(), 1.0, 1e-5);
                EXPECT_GE(m.row(r).minCoeff(), 0.0);
            }
        }
        EXPECT_FALSE(forward(p, xt, src, sample_instruction(), 0.3, false).trace.has_value());
    }
}

TEST(Forward, ConditionBranchIsInertAtInit) {
    auto p = init_params<float>(small_config(), 5);
    Rng rng(6);
    GridDims half{2, 3, 3, 4};
    auto xt = concat_widthwise(random_grid<float>(rng, half), random_grid<float>(rng, half));
    auto c1 = random_grid<float>(rng, half), c2 = random_grid<float>(rng, half);
    auto a = forward(p, xt, c1, sample_instruction(), 0.6, false).velocity;
    auto b = forward(p, xt, c2, sample_instruction(), 0.6, false).velocity;
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a.values()[i] - b.values()[i])));
    EXPECT_LT(m, 1e-7);
}

TEST(Forward, ConditionReachesOnlySourceTokensUnlessBroadcast) {
    // with attention disabled by zero projections the per-token path is local
    for (bool both : {false, true}) {
        ModelConfig c = small_config();
        c.depth = 1;
        c.lora_rank = 0;
        c.cond_both_halves = both;
        auto p = init_params<double>(c, 1);
        randomize(p, 2, 0.3);
        p[block_name(0, "attn.o")].setZero();
        Rng rng(3);
        GridDims half{1, 2, 2, 4};
        auto xt = concat_widthwise(random_grid<double>(rng, half), random_grid<double>(rng, half));
        auto c1 = random_grid<double>(rng, half), c2 = random_grid<double>(rng, half);
        auto a = forward(p, xt, c1, sample_instruction(), 0.5, false).velocity;
        auto b = forward(p, xt, c2, sample_instruction(), 0.5, false).velocity;
        InContextLatent<double> ia{a, 2}, ib{b, 2};
        EXPECT_NE(split(ia).first, split(ib).first);
        if (both)
            EXPECT_NE(split(ia).second, split(ib).second);
        else
            EXPECT_EQ(split(ia).second, split(ib).second);
    }
}

TEST(Forward, ShapeErrors) {
    auto p = init_params<float>(small_config(), 1);
    Rng rng(1);
    GridDims half{1, 2, 2, 4};
    auto xt = concat_widthwise(random_grid<float>(rng, half), random_grid<float>(rng, half));
    EXPECT_THROW(forward(p, xt, random_grid<float>(rng, GridDims{1, 2, 3, 4}), sample_instruction(), 0.5, false),
                 ShapeError);
    GridDims too_big{3, 2, 2, 4};
    auto big = concat_widthwise(random_grid<float>(rng, too_big), random_grid<float>(rng, too_big));
    EXPECT_THROW(forward(p, big, random_grid<float>(rng, too_big), sample_instruction(), 0.5, false), ShapeError);
}

TEST(Forward, NonFiniteActivationReportsLayer) {
    auto p = init_params<float>(small_config(), 1);
    p[block_name(1, "ffn.b2")](0, 0) = std::numeric_limits<float>::infinity();
    Rng rng(1);
    GridDims half{1, 2, 2, 4};
    auto src = random_grid<float>(rng, half);
    auto xt = concat_widthwise(src, src);
    try {
        forward(p, xt, src, sample_instruction(), 0.5, false);
        FAIL() << "expected a numeric error";
    } catch (const NumericError& e) {
        EXPECT_EQ(e.layer, 1);
    }
}

TEST(Lora, RankZeroAdaptersLeaveForwardUnchanged) {
    ModelConfig c = small_config();
    c.lora_rank = 0;
    auto base = init_params<double>(c, 4);
    ModelParams<double> none;
    none.cfg = c;
    auto applied = apply_lora(base, none);
    Rng rng(2);
    GridDims half{1, 2, 2, 4};
    auto src = random_grid<double>(rng, half);
    auto xt = concat_widthwise(src, random_grid<double>(rng, half));
    EXPECT_EQ(forward(base, xt, src, sample_instruction(), 0.4, false).velocity,
              forward(applied, xt, src, sample_instruction(), 0.4, false).velocity);
}

TEST(Lora, MergedForwardMatchesUnmerged) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto p = init_params<double>(small_config(), seed);
        randomize(p, seed + 100, 0.3);
        auto merged = merge_lora(p);
        EXPECT_EQ(merged.cfg.lora_rank, 0u);
        for (const auto& n : merged.names()) EXPECT_EQ(n.find("lora"), std::string::npos);
        Rng rng(seed);
        GridDims half{2, 2, 3, 4};
        auto src = random_grid<double>(rng, half);
        auto xt = concat_widthwise(src, random_grid<double>(rng, half));
        auto a = forward(p, xt, src, sample_instruction(), 0.7, false).velocity;
        auto b = forward(merged, xt, src, sample_instruction(), 0.7, false).velocity;
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-6);
    }
}

TEST(Lora, ApplyInstallsAdaptersAndChecksRank) {
    auto p = init_params<double>(small_config(), 1);
    ModelConfig c0 = small_config();
    c0.lora_rank = 0;
    auto base = init_params<double>(c0, 1);
    auto applied = apply_lora(base, p);
    EXPECT_EQ(applied.cfg.lora_rank, 3u);
    EXPECT_TRUE(applied.has(block_name(0, "attn.q") + ".lora_a"));
    ModelParams<double> wrong;
    wrong.cfg = small_config();
    wrong.cfg.lora_rank = 3;
    wrong.add("blk0.attn.q.lora_a", Mat<double>::Zero(16, 2));
    EXPECT_THROW(apply_lora(base, wrong), ValidationError);
    auto mismatched = p;
    mismatched.cfg.lora_rank = 2;
    EXPECT_THROW(apply_lora(mismatched, p), ValidationError);
}

TEST(Backward, FlowMatchingGradientMatchesFiniteDifferences) {
    ModelConfig c = small_config();
    c.token_dim = 8;
    c.depth = 1;
    c.lora_rank = 2;
    c.max_frames = 1;
    c.max_height = 2;
    c.max_width = 2;
    auto p = init_params<double>(c, 11);
    randomize(p, 12, 0.4);
    Rng rng(13);
    GridDims half{1, 2, 2, 4};
    auto src = random_grid<double>(rng, half);
    auto xt = concat_widthwise(src, random_grid<double>(rng, half));
    auto v = random_grid<double>(rng, xt.grid.dims());
    auto loss_of = [&](Tape<double>& tape, const BoundParams<double>& b) {
        auto g = forward_graph(tape, b, xt, src, sample_instruction(), 0.35);
        Mat<double> vm = Eigen::Map<const Mat<double>>(v.values().data(), g.velocity.rows(), g.velocity.cols());
        return ad::mean_square(ad::sub(g.velocity, tape.constant(vm)));
    };
    Tape<double> tape;
    auto bound = bind(tape, p);
    auto grads = backward(tape, loss_of(tape, bound), bound);
    double worst = 0;
    auto probe = p;
    for (std::size_t i = 0; i < p.count(); ++i)
        for (Eigen::Index k = 0; k < p.tensor(i).size(); ++k) {
            const double orig = probe.tensor(i).data()[k];
            auto eval = [&](double x) {
                probe.tensor(i).data()[k] = x;
                Tape<double> t2(false);
                auto b2 = bind(t2, probe);
                return loss_of(t2, b2).item();
            };
            const double num = (eval(orig + 1e-5) - eval(orig - 1e-5)) / 2e-5;
            probe.tensor(i).data()[k] = orig;
            const double a = grads[i].data()[k];
            worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
        }
    EXPECT_LE(worst, 1e-4);
}
