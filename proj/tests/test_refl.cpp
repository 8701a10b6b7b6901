#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "realign/diffusion.hpp"
#include "realign/refl.hpp"

using namespace realign;

namespace {
BackboneConfig small_backbone_cfg() {
    BackboneConfig bc;
    bc.channels = 2;
    bc.height = 4;
    bc.width = 4;
    bc.d_attn = 4;
    bc.d_txt = 8;
    bc.hidden = 8;
    return bc;
}

ReFLConfig small_cfg() {
    ReFLConfig cfg;
    cfg.T = 10;
    cfg.t_min = 5;
    cfg.t_max = 9;
    cfg.lambda = 1.0;
    cfg.learning_rate = 1e-2;
    cfg.momentum = 0.9;
    cfg.batch_size = 2;
    return cfg;
}
}  // namespace

TEST_CASE("config validation") {
    ReFLConfig c;
    CHECK_NOTHROW(c.validate());
    ReFLConfig bad = c;
    bad.lambda = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.t_min = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.t_min = 40;
    bad.t_max = 30;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.t_max = c.T + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("analytic stub reward matches hand arithmetic and its tracked gradient") {
    AnalyticStubReward rw(0.5);
    LatentImage x({1, 2, 2});
    x.data = {0.0, 1.0, 1.0, 0.0};  // mean 0.5 -> reward 0
    CHECK(rw.reward(x, Prompt::make("p")) == doctest::Approx(0.0));
    x.data = {1.0, 1.0, 1.0, 1.0};  // mean 1 -> -(0.5)^2
    CHECK(rw.reward(x, Prompt::make("p")) == doctest::Approx(-0.25));

    ad::Tape tape;
    std::vector<ad::Var> xv;
    for (double v : x.data) xv.emplace_back(v, &tape);
    ad::Var r = rw.reward_tracked(tape, xv, x.shape, Prompt::make("p"));
    CHECK(r.v == doctest::Approx(rw.reward(x, Prompt::make("p"))).epsilon(1e-12));
    auto g = tape.backward(r.idx);
    // d/dx_i of -(mean - target)^2 = -2 (mean - target) / n
    double expect = -2.0 * (1.0 - 0.5) / 4.0;
    for (const auto& v : xv)
        CHECK(g[static_cast<size_t>(v.idx)] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("draw_step_t stays in range, is deterministic, and is uniform") {
    ReFLConfig cfg;  // t_min 30, t_max 50
    const int bins = cfg.t_max - cfg.t_min + 1;  // 21
    std::vector<int> counts(static_cast<size_t>(bins), 0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        int t = draw_step_t(99, static_cast<uint64_t>(i), cfg);
        REQUIRE(t >= cfg.t_min);
        REQUIRE(t <= cfg.t_max);
        counts[static_cast<size_t>(t - cfg.t_min)] += 1;
        CHECK(draw_step_t(99, static_cast<uint64_t>(i), cfg) == t);
    }
    double expected = static_cast<double>(n) / bins;
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // chi-square critical value, 20 dof, significance 0.01
    CHECK(chi2 < 37.566);
}

TEST_CASE("refl gradient matches central finite differences of the objective") {
    ToyBackbone bb(small_backbone_cfg(), 5);
    NoiseSchedule sched = NoiseSchedule::linear(10);
    bb.set_total_steps(10);
    ReFLConfig cfg = small_cfg();
    AnalyticStubReward rw(0.5);
    TrainState state;
    state.seed = 11;

    std::vector<Prompt> batch = {Prompt::make("a red cup"), Prompt::make("a blue book")};
    auto pretrain = synth_pretrain_pairs(bb, 2, 3);
    const int t = 7;
    auto xts = refl_intermediate_latents(batch, state, t, bb, sched);

    StepMetrics m;
    auto grad = refl_gradient(batch, xts, t, state, cfg, rw, bb, sched, pretrain, &m);
    CHECK(m.l_total ==
          doctest::Approx(refl_total_loss(batch, xts, t, state, cfg, rw, bb, sched, pretrain))
              .epsilon(1e-10));

    Rng pick(4);
    for (int k = 0; k < 6; ++k) {
        size_t p = pick.raw() % bb.params().size();
        const double h = 1e-5;
        double orig = bb.params()[p];
        bb.params()[p] = orig + h;
        double lp = refl_total_loss(batch, xts, t, state, cfg, rw, bb, sched, pretrain);
        bb.params()[p] = orig - h;
        double lm = refl_total_loss(batch, xts, t, state, cfg, rw, bb, sched, pretrain);
        bb.params()[p] = orig;
        double fd = (lp - lm) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(grad[p]), 1e-8});
        CHECK(std::abs(fd - grad[p]) / denom < 1e-4);
    }
}

TEST_CASE("lambda zero reduces refl_step to the pure pretrain update bitwise") {
    NoiseSchedule sched = NoiseSchedule::linear(10);
    ReFLConfig cfg = small_cfg();
    cfg.lambda = 0.0;
    AnalyticStubReward rw(0.5);
    std::vector<Prompt> batch = {Prompt::make("a red cup"), Prompt::make("a blue book")};

    ToyBackbone a(small_backbone_cfg(), 5);
    a.set_total_steps(10);
    ToyBackbone b(small_backbone_cfg(), 5);
    b.set_total_steps(10);
    auto pretrain = synth_pretrain_pairs(a, 3, 9);

    TrainState sa, sb;
    sa.seed = sb.seed = 21;
    for (int i = 0; i < 3; ++i) {
        refl_step(batch, sa, cfg, rw, a, sched, pretrain);
        pretrain_step(sb, cfg, b, sched, pretrain);
    }
    CHECK(std::memcmp(a.params().data(), b.params().data(),
                      a.params().size() * sizeof(double)) == 0);
    CHECK(std::memcmp(sa.velocity.data(), sb.velocity.data(),
                      sa.velocity.size() * sizeof(double)) == 0);
}

TEST_CASE("refl_step is deterministic across repeated runs") {
    NoiseSchedule sched = NoiseSchedule::linear(10);
    ReFLConfig cfg = small_cfg();
    AnalyticStubReward rw(0.5);
    std::vector<Prompt> batch = {Prompt::make("a red cup")};

    auto run = [&](std::vector<double>& out) {
        ToyBackbone bb(small_backbone_cfg(), 5);
        bb.set_total_steps(10);
        auto pretrain = synth_pretrain_pairs(bb, 2, 3);
        TrainState st;
        st.seed = 33;
        for (int i = 0; i < 4; ++i) refl_step(batch, st, cfg, rw, bb, sched, pretrain);
        out = bb.params();
    };
    std::vector<double> p1, p2;
    run(p1);
    run(p2);
    CHECK(std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(double)) == 0);
}

TEST_CASE("reward ascends under the refl objective") {
    ToyBackbone bb(small_backbone_cfg(), 5);
    NoiseSchedule sched = NoiseSchedule::linear(10);
    bb.set_total_steps(10);
    ReFLConfig cfg = small_cfg();
    cfg.learning_rate = 2e-2;
    AnalyticStubReward rw(0.5);
    TrainState state;
    state.seed = 17;
    std::vector<Prompt> batch = {Prompt::make("a red cup"), Prompt::make("a blue book")};
    std::vector<PretrainPair> no_pretrain;

    // evaluate on full samples with frozen seeds, before and after training
    auto eval = [&]() {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) {
            SampleResult r = sample(batch[static_cast<size_t>(k % 2)].text, sched, bb, nullptr,
                                    1000 + static_cast<uint64_t>(k), bb.latent_shape());
            s += rw.reward(r.x0, batch[static_cast<size_t>(k % 2)]);
        }
        return s / 8.0;
    };
    double before = eval();
    for (int i = 0; i < 60; ++i) refl_step(batch, state, cfg, rw, bb, sched, no_pretrain);
    CHECK(eval() - before > 0.1);
}

TEST_CASE("train loop: records, validation curve, early stopping") {
    ToyBackbone bb(small_backbone_cfg(), 5);
    NoiseSchedule sched = NoiseSchedule::linear(10);
    bb.set_total_steps(10);
    ReFLConfig cfg = small_cfg();
    cfg.max_iterations = 40;
    cfg.eval_interval = 2;
    cfg.early_stop_patience = 3;
    cfg.learning_rate = 1e-4;  // tiny steps so validation plateaus
    cfg.early_stop_min_delta = 1e-3;
    AnalyticStubReward rw(0.5);
    TrainState state;
    state.seed = 8;
    std::vector<Prompt> data = {Prompt::make("a red cup"), Prompt::make("a blue book"),
                                Prompt::make("a green tree")};
    std::vector<Prompt> val = {Prompt::make("a yellow lamp")};
    auto pretrain = synth_pretrain_pairs(bb, 4, 2);

    TrainReport rep = train(data, cfg, state, rw, bb, sched, pretrain, val);
    CHECK(rep.steps_run == rep.records.size());
    CHECK(rep.steps_run >= 1);
    CHECK(!rep.val_curve.empty());
    CHECK(rep.early_stopped);
    CHECK(rep.steps_run < 40);  // stopped before the cap
    CHECK(rep.best_val_reward == state.best_val_reward);

    CHECK_THROWS_AS(train({}, cfg, state, rw, bb, sched, pretrain, val), ConfigError);
}

TEST_CASE("synth pretrain pairs are deterministic and well-formed") {
    ToyBackbone bb(small_backbone_cfg(), 5);
    auto a = synth_pretrain_pairs(bb, 5, 77);
    auto b = synth_pretrain_pairs(bb, 5, 77);
    REQUIRE(a.size() == 5);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first.shape == bb.latent_shape());
        CHECK(a[i].first.all_finite());
        CHECK(a[i].first.data == b[i].first.data);
        CHECK(a[i].second.text == b[i].second.text);
        CHECK(!a[i].second.text.empty());
    }
    auto c = synth_pretrain_pairs(bb, 5, 78);
    CHECK(a[0].first.data != c[0].first.data);
}

TEST_CASE("refl_gradient rejects mismatched latent batch") {
    ToyBackbone bb(small_backbone_cfg(), 5);
    NoiseSchedule sched = NoiseSchedule::linear(10);
    bb.set_total_steps(10);
    ReFLConfig cfg = small_cfg();
    AnalyticStubReward rw(0.5);
    TrainState state;
    std::vector<Prompt> batch = {Prompt::make("a"), Prompt::make("b")};
    std::vector<LatentImage> one = {LatentImage(bb.latent_shape())};
    CHECK_THROWS_AS(refl_gradient(batch, one, 5, state, cfg, rw, bb, sched, {}), ShapeError);
    CHECK_THROWS_AS(refl_total_loss(batch, one, 5, state, cfg, rw, bb, sched, {}), ShapeError);
}
