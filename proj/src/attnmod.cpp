#include "realign/attnmod.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "realign/errors.hpp"

namespace realign {

TokenOwnership build_token_ownership(const std::string& prompt,
                                     const std::vector<ObjectAnnotation>& annotations,
                                     int max_tokens) {
    auto toks = tokenize(prompt);
    if (static_cast<int>(toks.size()) > max_tokens) toks.resize(static_cast<size_t>(max_tokens));
    TokenOwnership own;
    own.owner.assign(toks.size(), -1);
    for (const auto& ann : annotations) {
        std::set<std::string> cap_tokens;
        for (const auto& t : tokenize(ann.local_caption)) cap_tokens.insert(t);
        for (size_t j = 0; j < toks.size(); ++j)
            if (own.owner[j] < 0 && cap_tokens.count(toks[j]))
                own.owner[j] = ann.object_index;
    }
    return own;
}

ScoreMatrix build_score_matrix(const std::vector<ObjectAnnotation>& annotations,
                               const TokenOwnership& ownership, int n_q, int n_k) {
    if (static_cast<int>(ownership.owner.size()) != n_k)
        throw ShapeError("build_score_matrix: ownership length != n_k");
    for (int o : ownership.owner)
        if (o >= 0 && o >= static_cast<int>(annotations.size()))
            throw RangeError("build_score_matrix: token owned by missing object index " +
                             std::to_string(o));
    for (const auto& ann : annotations)
        if (!ann.mask.grid.empty() &&
            static_cast<int64_t>(ann.mask.grid.size()) != static_cast<int64_t>(n_q))
            throw ShapeError("build_score_matrix: mask for tag \"" + ann.tag +
                             "\" flattens to " + std::to_string(ann.mask.grid.size()) +
                             ", expected " + std::to_string(n_q));

    ScoreMatrix sm;
    sm.n_q = n_q;
    sm.n_k = n_k;
    sm.S.assign(static_cast<size_t>(n_q) * static_cast<size_t>(n_k), 1.0);
    std::vector<uint8_t> covered(sm.S.size(), 0);
    for (int j = 0; j < n_k; ++j) {
        int o = ownership.owner[static_cast<size_t>(j)];
        if (o < 0) continue;
        bool found = false;
        for (const auto& ann : annotations) {
            if (ann.object_index != o) continue;
            found = true;
            if (ann.mask.grid.empty()) continue;
            for (int p = 0; p < n_q; ++p) {
                if (!ann.mask.grid[static_cast<size_t>(p)]) continue;
                const size_t idx = static_cast<size_t>(p) * n_k + static_cast<size_t>(j);
                // overlap rule: per-cell maximum over contributing objects
                sm.S[idx] = covered[idx] ? std::max(sm.S[idx], ann.score) : ann.score;
                covered[idx] = 1;
            }
        }
        if (!found)
            throw RangeError("build_score_matrix: token owned by missing object index " +
                             std::to_string(o));
    }
    return sm;
}

void pos_neg_maps(const AttentionLogits& B, ExtremaMode mode, std::vector<double>& m_pos,
                  std::vector<double>& m_neg) {
    const size_t n = B.B.size();
    m_pos.resize(n);
    m_neg.resize(n);
    for (double v : B.B)
        if (!std::isfinite(v)) throw NumericError("pos_neg_maps: non-finite logit");
    if (mode == ExtremaMode::Global) {
        double mx = B.B[0], mn = B.B[0];
        for (double v : B.B) {
            mx = std::max(mx, v);
            mn = std::min(mn, v);
        }
        for (size_t i = 0; i < n; ++i) {
            m_pos[i] = mx - B.B[i];
            m_neg[i] = B.B[i] - mn;
        }
    } else {
        for (int p = 0; p < B.n_q; ++p) {
            const size_t base = static_cast<size_t>(p) * B.n_k;
            double mx = B.B[base], mn = B.B[base];
            for (int j = 0; j < B.n_k; ++j) {
                mx = std::max(mx, B.B[base + static_cast<size_t>(j)]);
                mn = std::min(mn, B.B[base + static_cast<size_t>(j)]);
            }
            for (int j = 0; j < B.n_k; ++j) {
                m_pos[base + static_cast<size_t>(j)] = mx - B.B[base + static_cast<size_t>(j)];
                m_neg[base + static_cast<size_t>(j)] = B.B[base + static_cast<size_t>(j)] - mn;
            }
        }
    }
}

namespace {
std::vector<double> normalized_b(const AttentionLogits& B, BNormMode mode) {
    if (mode == BNormMode::Raw) return B.B;
    double mx = B.B[0], mn = B.B[0];
    for (double v : B.B) {
        mx = std::max(mx, v);
        mn = std::min(mn, v);
    }
    std::vector<double> out(B.B.size());
    double range = mx - mn;
    if (range == 0.0) return out;  // constant logits normalize to 0
    for (size_t i = 0; i < out.size(); ++i) out[i] = (B.B[i] - mn) / range;
    return out;
}
}  // namespace

std::vector<double> modulation_delta(const AttentionLogits& B, const ScoreMatrix& S,
                                     const std::vector<uint8_t>& R, int t,
                                     const ModulationConfig& cfg) {
    if (S.n_q != B.n_q || S.n_k != B.n_k)
        throw ShapeError("modulation_delta: score matrix shape mismatch");
    if (static_cast<int>(R.size()) != B.n_k)
        throw ShapeError("modulation_delta: activation vector length != n_k");
    const double lt = cfg.lambda_t(t);
    std::vector<double> delta(B.B.size(), 0.0);
    if (lt == 0.0) return delta;

    std::vector<double> m_pos, m_neg;
    pos_neg_maps(B, cfg.extrema, m_pos, m_neg);
    std::vector<double> bhat = normalized_b(B, cfg.b_norm);

    for (int p = 0; p < B.n_q; ++p) {
        for (int j = 0; j < B.n_k; ++j) {
            const size_t i = static_cast<size_t>(p) * B.n_k + static_cast<size_t>(j);
            double one_minus_b = 1.0 - bhat[i];
            double m = R[static_cast<size_t>(j)]
                           ? lt * m_pos[i] * one_minus_b
                           : -lt * m_neg[i] * one_minus_b;
            if (!std::isfinite(m))
                throw NumericError("modulation_delta: non-finite modulation term at (" +
                                   std::to_string(p) + "," + std::to_string(j) + ")");
            delta[i] = S.S[i] * m;
        }
    }
    return delta;
}

std::vector<double> baseline_attention(const AttentionLogits& B) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(B.d));
    std::vector<double> A(B.B.size());
    for (int p = 0; p < B.n_q; ++p) {
        const size_t base = static_cast<size_t>(p) * B.n_k;
        double mx = B.B[base] * inv_sqrt_d;
        for (int j = 1; j < B.n_k; ++j)
            mx = std::max(mx, B.B[base + static_cast<size_t>(j)] * inv_sqrt_d);
        double denom = 0.0;
        for (int j = 0; j < B.n_k; ++j) {
            double e = std::exp(B.B[base + static_cast<size_t>(j)] * inv_sqrt_d - mx);
            A[base + static_cast<size_t>(j)] = e;
            denom += e;
        }
        for (int j = 0; j < B.n_k; ++j) A[base + static_cast<size_t>(j)] /= denom;
    }
    return A;
}

std::vector<double> modulate(const AttentionLogits& B, const ScoreMatrix& S,
                             const std::vector<uint8_t>& R, int t, const ModulationConfig& cfg) {
    std::vector<double> delta = modulation_delta(B, S, R, t, cfg);
    AttentionLogits mod = B;
    for (size_t i = 0; i < mod.B.size(); ++i) mod.B[i] += delta[i];
    return baseline_attention(mod);
}

Mask resample_mask(const Mask& m, int target_h, int target_w) {
    if (m.height <= 0 || m.width <= 0) {
        Mask out;
        out.height = target_h;
        out.width = target_w;
        out.grid.assign(static_cast<size_t>(target_h) * static_cast<size_t>(target_w), 0);
        return out;
    }
    Mask out;
    out.height = target_h;
    out.width = target_w;
    out.grid.assign(static_cast<size_t>(target_h) * static_cast<size_t>(target_w), 0);
    for (int y = 0; y < target_h; ++y) {
        int ys0 = static_cast<int>(static_cast<int64_t>(y) * m.height / target_h);
        int ys1 = static_cast<int>((static_cast<int64_t>(y + 1) * m.height + target_h - 1) / target_h);
        ys1 = std::max(ys1, ys0 + 1);
        ys1 = std::min(ys1, m.height);
        for (int x = 0; x < target_w; ++x) {
            int xs0 = static_cast<int>(static_cast<int64_t>(x) * m.width / target_w);
            int xs1 =
                static_cast<int>((static_cast<int64_t>(x + 1) * m.width + target_w - 1) / target_w);
            xs1 = std::max(xs1, xs0 + 1);
            xs1 = std::min(xs1, m.width);
            uint8_t v = 0;
            for (int sy = ys0; sy < ys1 && !v; ++sy)
                for (int sx = xs0; sx < xs1; ++sx)
                    if (m.grid[static_cast<size_t>(sy) * m.width + static_cast<size_t>(sx)]) {
                        v = 1;
                        break;
                    }
            out.grid[static_cast<size_t>(y) * target_w + static_cast<size_t>(x)] = v;
        }
    }
    return out;
}

namespace {
// pick a target (h, w) with h*w == n_q closest to the image aspect ratio
std::pair<int, int> layer_dims(int n_q, int image_h, int image_w) {
    if (n_q == image_h * image_w) return {image_h, image_w};
    double want = static_cast<double>(image_h) / image_w;
    int best_h = 1;
    double best_err = 1e300;
    for (int h = 1; h <= n_q; ++h) {
        if (n_q % h) continue;
        double err = std::abs(static_cast<double>(h) / (n_q / h) - want);
        if (err < best_err) {
            best_err = err;
            best_h = h;
        }
    }
    return {best_h, n_q / best_h};
}
}  // namespace

ModulationHook make_modulation_hook(const std::vector<ObjectAnnotation>& annotations,
                                    const std::string& prompt, int image_h, int image_w,
                                    const ModulationConfig& cfg) {
    ModulationHook handle;
    handle.before = std::make_shared<std::vector<AttnTrace>>();
    auto before = handle.before;
    handle.fn = [annotations, prompt, image_h, image_w, cfg,
                 before](const AttnContext& ctx, const std::vector<double>& logits) {
        AttentionLogits B;
        B.B = logits;
        B.n_q = ctx.n_q;
        B.n_k = ctx.n_k;
        B.d = ctx.d;

        AttnTrace pre;
        pre.step_t = ctx.step_t;
        pre.n_q = ctx.n_q;
        pre.n_k = ctx.n_k;
        pre.attn = baseline_attention(B);
        before->push_back(std::move(pre));

        auto [lh, lw] = layer_dims(ctx.n_q, image_h, image_w);
        std::vector<ObjectAnnotation> scaled = annotations;
        for (auto& ann : scaled) {
            if (ann.mask.grid.empty()) continue;
            ann.mask = resample_mask(ann.mask, lh, lw);
            if (ann.mask.grid.empty())
                throw ShapeError("attention hook: mask resample failed for tag \"" + ann.tag +
                                 "\"");
        }
        TokenOwnership own = build_token_ownership(prompt, scaled, ctx.n_k);
        own.owner.resize(static_cast<size_t>(ctx.n_k), -1);
        ScoreMatrix S = build_score_matrix(scaled, own, ctx.n_q, ctx.n_k);
        return modulation_delta(B, S, own.activation(), ctx.step_t, cfg);
    };
    return handle;
}

}  // namespace realign
