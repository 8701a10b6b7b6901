#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "realign/attnmod.hpp"
#include "realign/rng.hpp"

using namespace realign;

namespace {
ObjectAnnotation make_ann(std::string tag, std::string caption, double score, int index,
                          Mask mask = {}) {
    ObjectAnnotation a;
    a.tag = std::move(tag);
    a.local_caption = std::move(caption);
    a.score = score;
    a.object_index = index;
    a.mask = std::move(mask);
    return a;
}

Mask mask_of(int h, int w, std::vector<uint8_t> grid) {
    Mask m;
    m.height = h;
    m.width = w;
    m.grid = std::move(grid);
    return m;
}

// Brute-force reference for the modulated attention, written independently of
// the library implementation: min-max normalize B, build the positive/negative
// maps from the requested extrema, apply the score-weighted term, then softmax.
std::vector<double> reference_modulate(const AttentionLogits& B, const ScoreMatrix& S,
                                       const std::vector<uint8_t>& R, int t,
                                       const ModulationConfig& cfg) {
    const int nq = B.n_q, nk = B.n_k;
    const double lt = cfg.lambda_0 * static_cast<double>(t) / cfg.T;
    double gmax = -1e300, gmin = 1e300;
    for (double v : B.B) {
        gmax = std::max(gmax, v);
        gmin = std::min(gmin, v);
    }
    std::vector<double> logits(B.B.size());
    for (int p = 0; p < nq; ++p) {
        double rmax = -1e300, rmin = 1e300;
        for (int j = 0; j < nk; ++j) {
            rmax = std::max(rmax, B.B[static_cast<size_t>(p * nk + j)]);
            rmin = std::min(rmin, B.B[static_cast<size_t>(p * nk + j)]);
        }
        for (int j = 0; j < nk; ++j) {
            size_t i = static_cast<size_t>(p * nk + j);
            double b = B.B[i];
            double mpos, mneg;
            if (cfg.extrema == ExtremaMode::Global) {
                mpos = gmax - b;
                mneg = b - gmin;
            } else {
                mpos = rmax - b;
                mneg = b - rmin;
            }
            double bhat;
            if (cfg.b_norm == BNormMode::Raw)
                bhat = b;
            else
                bhat = (gmax == gmin) ? 0.0 : (b - gmin) / (gmax - gmin);
            double m = R[static_cast<size_t>(j)] ? lt * mpos * (1.0 - bhat)
                                                 : -lt * mneg * (1.0 - bhat);
            logits[i] = b + S.S[i] * m;
        }
    }
    // plain softmax over logits / sqrt(d)
    std::vector<double> A(logits.size());
    for (int p = 0; p < nq; ++p) {
        double denom = 0.0;
        for (int j = 0; j < nk; ++j)
            denom += std::exp(logits[static_cast<size_t>(p * nk + j)] /
                              std::sqrt(static_cast<double>(B.d)));
        for (int j = 0; j < nk; ++j)
            A[static_cast<size_t>(p * nk + j)] =
                std::exp(logits[static_cast<size_t>(p * nk + j)] /
                         std::sqrt(static_cast<double>(B.d))) /
                denom;
    }
    return A;
}
}  // namespace

TEST_CASE("token ownership from local captions") {
    std::vector<ObjectAnnotation> anns = {
        make_ann("book", "a red book", 2.0, 0),
        make_ann("pen", "a yellow pen", 2.0, 1),
    };
    TokenOwnership own = build_token_ownership("a red book and a yellow pen", anns);
    // tokens: a red book and a yellow pen
    REQUIRE(own.owner.size() == 7);
    CHECK(own.owner[0] == 0);  // "a" claimed first by the book caption
    CHECK(own.owner[1] == 0);  // red
    CHECK(own.owner[2] == 0);  // book
    CHECK(own.owner[3] == -1); // and
    CHECK(own.owner[4] == 0);  // a (first claim wins)
    CHECK(own.owner[5] == 1);  // yellow
    CHECK(own.owner[6] == 1);  // pen

    auto r = own.activation();
    CHECK(r == std::vector<uint8_t>{1, 1, 1, 0, 1, 1, 1});

    // max_tokens truncation
    TokenOwnership trunc = build_token_ownership("a red book and a yellow pen", anns, 3);
    CHECK(trunc.owner.size() == 3);
}

TEST_CASE("score matrix: scores land under mask and owned column, 1 elsewhere") {
    // 2x2 spatial grid flattened to n_q = 4
    std::vector<ObjectAnnotation> anns = {
        make_ann("book", "a book", 2.0, 0, mask_of(2, 2, {1, 0, 0, 0})),
        make_ann("desk", "a desk", 0.5, 1, mask_of(2, 2, {0, 0, 1, 1})),
    };
    TokenOwnership own;
    own.owner = {-1, 0, 1};  // token 1 -> book, token 2 -> desk
    ScoreMatrix sm = build_score_matrix(anns, own, 4, 3);
    // column 0 unowned: all ones
    for (int p = 0; p < 4; ++p) CHECK(sm.S[static_cast<size_t>(p * 3)] == 1.0);
    // column 1 (book): 2 where the mask covers (p=0), 1 elsewhere
    CHECK(sm.S[0 * 3 + 1] == 2.0);
    CHECK(sm.S[1 * 3 + 1] == 1.0);
    CHECK(sm.S[2 * 3 + 1] == 1.0);
    CHECK(sm.S[3 * 3 + 1] == 1.0);
    // column 2 (desk): 0.5 where the mask covers (p=2,3) even though 0.5 < 1
    CHECK(sm.S[0 * 3 + 2] == 1.0);
    CHECK(sm.S[1 * 3 + 2] == 1.0);
    CHECK(sm.S[2 * 3 + 2] == 0.5);
    CHECK(sm.S[3 * 3 + 2] == 0.5);
}

TEST_CASE("score matrix: overlapping objects resolve by per-cell maximum") {
    // two annotations share object index 0 with overlapping masks
    std::vector<ObjectAnnotation> anns = {
        make_ann("cup", "a cup", 0.5, 0, mask_of(1, 2, {1, 1})),
        make_ann("cup", "a cup", 2.0, 0, mask_of(1, 2, {0, 1})),
    };
    TokenOwnership own;
    own.owner = {0};
    ScoreMatrix sm = build_score_matrix(anns, own, 2, 1);
    CHECK(sm.S[0] == 0.5);
    CHECK(sm.S[1] == 2.0);  // max(0.5, 2.0)
}

TEST_CASE("score matrix error paths") {
    std::vector<ObjectAnnotation> anns = {
        make_ann("book", "a book", 2.0, 0, mask_of(2, 2, {1, 0, 0, 0}))};
    TokenOwnership own;
    own.owner = {0, -1};
    CHECK_NOTHROW(build_score_matrix(anns, own, 4, 2));
    CHECK_THROWS_AS(build_score_matrix(anns, own, 4, 3), ShapeError);  // length != n_k
    CHECK_THROWS_AS(build_score_matrix(anns, own, 9, 2), ShapeError);  // mask size mismatch
    TokenOwnership missing;
    missing.owner = {5, -1};
    CHECK_THROWS_AS(build_score_matrix(anns, missing, 4, 2), RangeError);
}

TEST_CASE("positive and negative maps") {
    AttentionLogits B;
    B.n_q = 2;
    B.n_k = 2;
    B.B = {0.0, 1.0, 2.0, 4.0};
    std::vector<double> mpos, mneg;
    pos_neg_maps(B, ExtremaMode::Global, mpos, mneg);
    CHECK(mpos == std::vector<double>{4.0, 3.0, 2.0, 0.0});
    CHECK(mneg == std::vector<double>{0.0, 1.0, 2.0, 4.0});
    for (size_t i = 0; i < mpos.size(); ++i) {
        CHECK(mpos[i] >= 0.0);
        CHECK(mneg[i] >= 0.0);
        CHECK(mpos[i] + mneg[i] == doctest::Approx(4.0));  // max - min
    }
    pos_neg_maps(B, ExtremaMode::PerRow, mpos, mneg);
    CHECK(mpos == std::vector<double>{1.0, 0.0, 2.0, 0.0});
    CHECK(mneg == std::vector<double>{0.0, 1.0, 0.0, 2.0});

    B.B[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(pos_neg_maps(B, ExtremaMode::Global, mpos, mneg), NumericError);
}

TEST_CASE("modulation matches the brute-force reference") {
    Rng rng(31);
    for (auto extrema : {ExtremaMode::Global, ExtremaMode::PerRow}) {
        for (auto bnorm : {BNormMode::MinMax, BNormMode::Raw}) {
            AttentionLogits B;
            B.n_q = 6;
            B.n_k = 4;
            B.d = 8;
            B.B.resize(24);
            for (double& v : B.B) v = rng.normal();
            ScoreMatrix S;
            S.n_q = 6;
            S.n_k = 4;
            S.S.resize(24);
            const double choices[] = {0.0, 0.5, 1.0, 2.0};
            for (double& v : S.S) v = choices[rng.raw() % 4];
            std::vector<uint8_t> R = {1, 0, 1, 0};
            ModulationConfig cfg;
            cfg.lambda_0 = 0.8;
            cfg.T = 50;
            cfg.extrema = extrema;
            cfg.b_norm = bnorm;
            for (int t : {1, 25, 50}) {
                auto got = modulate(B, S, R, t, cfg);
                auto want = reference_modulate(B, S, R, t, cfg);
                REQUIRE(got.size() == want.size());
                for (size_t i = 0; i < got.size(); ++i)
                    CHECK(std::abs(got[i] - want[i]) < 1e-10);
                // rows still sum to one
                for (int p = 0; p < 6; ++p) {
                    double row = 0.0;
                    for (int j = 0; j < 4; ++j) row += got[static_cast<size_t>(p * 4 + j)];
                    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
                }
            }
        }
    }
}

TEST_CASE("lambda scaling: zero at t=0, full strength at t=T, exact zero delta") {
    ModulationConfig cfg;
    cfg.lambda_0 = 0.7;
    cfg.T = 50;
    CHECK(cfg.lambda_t(0) == 0.0);
    CHECK(cfg.lambda_t(25) == doctest::Approx(0.35));
    CHECK(cfg.lambda_t(50) == doctest::Approx(0.7));

    AttentionLogits B;
    B.n_q = 2;
    B.n_k = 2;
    B.B = {0.3, -0.2, 0.9, 0.1};
    ScoreMatrix S;
    S.n_q = 2;
    S.n_k = 2;
    S.S = {2, 1, 1, 0.5};
    std::vector<uint8_t> R = {1, 0};
    auto delta = modulation_delta(B, S, R, 0, cfg);
    for (double v : delta) CHECK(v == 0.0);

    // modulated attention at t=0 is bitwise the baseline
    auto base = baseline_attention(B);
    auto mod = modulate(B, S, R, 0, cfg);
    CHECK(base == mod);
}

TEST_CASE("modulation shifts mass toward active tokens") {
    // uniform logits: M_pos = M_neg = 0 globally... use varied logits instead
    AttentionLogits B;
    B.n_q = 1;
    B.n_k = 3;
    B.d = 1;
    B.B = {0.5, 0.2, 0.8};
    ScoreMatrix S;
    S.n_q = 1;
    S.n_k = 3;
    S.S = {2.0, 1.0, 1.0};
    std::vector<uint8_t> R = {1, 0, 0};  // only token 0 belongs to a grounded object
    ModulationConfig cfg;
    cfg.lambda_0 = 1.0;
    cfg.T = 50;
    auto base = baseline_attention(B);
    auto mod = modulate(B, S, R, 50, cfg);
    CHECK(mod[0] > base[0]);         // active token gains
    CHECK(mod[2] < base[2]);         // inactive high-logit token loses
}

TEST_CASE("modulation_delta shape errors") {
    AttentionLogits B;
    B.n_q = 2;
    B.n_k = 2;
    B.B = {0, 0, 0, 0};
    ScoreMatrix S;
    S.n_q = 2;
    S.n_k = 3;
    S.S.assign(6, 1.0);
    ModulationConfig cfg;
    CHECK_THROWS_AS(modulation_delta(B, S, {1, 0}, 10, cfg), ShapeError);
    S.n_k = 2;
    S.S.assign(4, 1.0);
    CHECK_THROWS_AS(modulation_delta(B, S, {1, 0, 1}, 10, cfg), ShapeError);
}

TEST_CASE("mask resampling") {
    Mask m = mask_of(2, 2, {1, 0, 0, 0});
    // identity
    Mask same = resample_mask(m, 2, 2);
    CHECK(same.grid == m.grid);
    // upsample: top-left quadrant covered
    Mask up = resample_mask(m, 4, 4);
    CHECK(up.height == 4);
    CHECK(up.width == 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(up.grid[static_cast<size_t>(y * 4 + x)] == ((y < 2 && x < 2) ? 1 : 0));
    // downsample: any covered source pixel marks the target cell
    Mask big = mask_of(4, 4, {0, 0, 0, 0,
                              0, 1, 0, 0,
                              0, 0, 0, 0,
                              0, 0, 0, 0});
    Mask down = resample_mask(big, 2, 2);
    CHECK(down.grid == std::vector<uint8_t>{1, 0, 0, 0});
    // empty input gives an all-zero mask of the target size
    Mask none = resample_mask(Mask{}, 3, 3);
    CHECK(none.area() == 0);
    CHECK(none.grid.size() == 9);
}

TEST_CASE("modulation hook records pre-modulation attention and applies the delta") {
    std::vector<ObjectAnnotation> anns = {
        make_ann("book", "a red book", 2.0, 0, mask_of(4, 4, std::vector<uint8_t>(16, 1)))};
    ModulationConfig cfg;
    cfg.lambda_0 = 0.5;
    cfg.T = 10;
    ModulationHook hook = make_modulation_hook(anns, "a red book", 4, 4, cfg);

    AttnContext ctx;
    ctx.step_t = 10;
    ctx.n_q = 16;
    ctx.n_k = 3;  // a red book
    ctx.d = 4;
    Rng rng(2);
    std::vector<double> logits(48);
    for (double& v : logits) v = rng.normal();

    auto delta = hook.fn(ctx, logits);
    REQUIRE(delta.size() == logits.size());
    REQUIRE(hook.before->size() == 1);
    CHECK((*hook.before)[0].step_t == 10);
    CHECK((*hook.before)[0].n_q == 16);
    // every token is owned by the grounded object, so deltas are non-trivial
    bool any = false;
    for (double v : delta) any = any || v != 0.0;
    CHECK(any);

    // a second call appends another trace
    hook.fn(ctx, logits);
    CHECK(hook.before->size() == 2);
}
