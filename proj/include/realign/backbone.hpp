#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "realign/autodiff.hpp"
#include "realign/errors.hpp"
#include "realign/rng.hpp"
#include "realign/tensor.hpp"

namespace realign {

// Context handed to an attention-modulation hook for one cross-attention evaluation.
struct AttnContext {
    int step_t = 0;   // current denoising step (1..T), 0 when outside sampling
    int n_q = 0;      // flattened spatial query positions
    int n_k = 0;      // text-token keys
    int d = 0;        // key/query feature length
};

// Returns an additive logit delta (n_q*n_k, row-major) applied before the softmax.
// An empty return means "no modulation".
using AttnHook = std::function<std::vector<double>(const AttnContext&, const std::vector<double>& logits)>;

struct AttnTrace {
    int step_t = 0;
    int n_q = 0;
    int n_k = 0;
    std::vector<double> attn;  // post-softmax rows, row-major
};

// Denoising network epsilon_theta(x_t, prompt, t).
class DenoiserInterface {
public:
    virtual ~DenoiserInterface() = default;
    virtual Tensor predict_noise(const Tensor& x_t, const std::string& prompt, int t,
                                 const AttnHook* hook = nullptr,
                                 AttnTrace* trace = nullptr) const = 0;
};

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> toks;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            toks.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) toks.push_back(cur);
    if (toks.empty()) toks.push_back("<empty>");
    return toks;
}

struct BackboneConfig {
    int channels = 4;
    int height = 8;
    int width = 8;
    int d_attn = 8;
    int d_txt = 16;
    int hidden = 32;
    int max_tokens = 16;
};

// Small deterministic denoiser with exactly one cross-attention layer.
// Per spatial position p: q_p = W_q f_p + u*(t/T); keys/values from stub token
// embeddings; output head is a one-hidden-layer MLP over [f_p ; context_p ; t/T].
class ToyBackbone : public DenoiserInterface {
public:
    explicit ToyBackbone(BackboneConfig cfg = {}, uint64_t init_seed = 7)
        : cfg_(cfg), T_hint_(50) {
        params_.resize(static_cast<size_t>(param_count()));
        Rng rng(mix_seed(init_seed, "toy-backbone-init"));
        for (double& p : params_) p = 0.1 * rng.normal();
    }

    const BackboneConfig& config() const { return cfg_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    int param_count() const {
        const int C = cfg_.channels, da = cfg_.d_attn, dt = cfg_.d_txt, h = cfg_.hidden;
        return da * C + da + da * dt + C * dt + h * (2 * C + 1) + h + C * h + C;
    }

    // T used to scale the timestep feature t/T.
    void set_total_steps(int T) { T_hint_ = T; }
    int total_steps() const { return T_hint_; }

    std::vector<int64_t> latent_shape() const {
        return {cfg_.channels, cfg_.height, cfg_.width};
    }

    // Deterministic stub text encoder: each token maps to a fixed d_txt vector.
    std::vector<std::vector<double>> token_embeddings(const std::string& prompt) const {
        auto toks = tokenize(prompt);
        if (static_cast<int>(toks.size()) > cfg_.max_tokens)
            toks.resize(static_cast<size_t>(cfg_.max_tokens));
        std::vector<std::vector<double>> out;
        out.reserve(toks.size());
        for (const auto& tok : toks) {
            Rng rng(mix_seed(fnv1a(tok), "toy-token-embed"));
            std::vector<double> e(static_cast<size_t>(cfg_.d_txt));
            for (double& v : e) v = rng.normal();
            out.push_back(std::move(e));
        }
        return out;
    }

    Tensor predict_noise(const Tensor& x_t, const std::string& prompt, int t,
                         const AttnHook* hook = nullptr,
                         AttnTrace* trace = nullptr) const override {
        check_input(x_t);
        Tensor eps(x_t.shape);
        ParamsD acc{params_.data()};
        forward_impl<double>(acc, x_t, prompt, t, hook, trace, eps.data.data());
        return eps;
    }

    // Gradient-tracked forward: parameters are tape leaves, x_t is constant.
    std::vector<ad::Var> predict_noise_tracked(ad::Tape& tape, const std::vector<ad::Var>& pvars,
                                               const Tensor& x_t, const std::string& prompt,
                                               int t) const {
        check_input(x_t);
        if (static_cast<int>(pvars.size()) != param_count())
            throw ShapeError("ToyBackbone: tracked parameter count mismatch");
        std::vector<ad::Var> eps(static_cast<size_t>(x_t.numel()), ad::Var{0.0, &tape});
        ParamsV acc{pvars.data()};
        forward_impl<ad::Var>(acc, x_t, prompt, t, nullptr, nullptr, eps.data(), &tape);
        return eps;
    }

    std::vector<ad::Var> make_param_vars(ad::Tape& tape) const {
        std::vector<ad::Var> pv;
        pv.reserve(params_.size());
        for (double p : params_) pv.emplace_back(p, &tape);
        return pv;
    }

private:
    struct ParamsD {
        const double* p;
        double operator()(int i) const { return p[i]; }
    };
    struct ParamsV {
        const ad::Var* p;
        ad::Var operator()(int i) const { return p[i]; }
    };

    void check_input(const Tensor& x) const {
        if (x.shape != latent_shape())
            throw ShapeError("ToyBackbone: latent shape " + shape_str(x.shape) +
                             " does not match " + shape_str(latent_shape()));
    }

    // Parameter slice offsets into the flat vector.
    struct Off {
        int wq, ut, wk, wv, wh, bh, wo, bo;
    };
    Off offsets() const {
        const int C = cfg_.channels, da = cfg_.d_attn, dt = cfg_.d_txt, h = cfg_.hidden;
        Off o{};
        o.wq = 0;
        o.ut = o.wq + da * C;
        o.wk = o.ut + da;
        o.wv = o.wk + da * dt;
        o.wh = o.wv + C * dt;
        o.bh = o.wh + h * (2 * C + 1);
        o.wo = o.bh + h;
        o.bo = o.wo + C * h;
        return o;
    }

    template <class S, class P>
    void forward_impl(P param, const Tensor& x_t, const std::string& prompt, int t,
                      const AttnHook* hook, AttnTrace* trace, S* eps_out,
                      ad::Tape* tape = nullptr) const {
        using std::exp;
        using std::tanh;
        const int C = cfg_.channels, H = cfg_.height, W = cfg_.width;
        const int da = cfg_.d_attn, dt = cfg_.d_txt, hid = cfg_.hidden;
        const int n_q = H * W;
        const Off off = offsets();
        const double tfrac = static_cast<double>(t) / static_cast<double>(T_hint_);

        auto embeds = token_embeddings(prompt);
        const int n_k = static_cast<int>(embeds.size());

        auto var = [&](double c) {
            if constexpr (std::is_same_v<S, ad::Var>)
                return ad::Var(c, tape);
            else
                return c;
        };

        // keys and values per token
        std::vector<S> K(static_cast<size_t>(n_k * da), var(0.0));
        std::vector<S> V(static_cast<size_t>(n_k * C), var(0.0));
        for (int j = 0; j < n_k; ++j) {
            for (int a = 0; a < da; ++a) {
                S acc = param(off.wk + a * dt) * embeds[static_cast<size_t>(j)][0];
                for (int e = 1; e < dt; ++e)
                    acc = acc + param(off.wk + a * dt + e) * embeds[static_cast<size_t>(j)][static_cast<size_t>(e)];
                K[static_cast<size_t>(j * da + a)] = acc;
            }
            for (int c = 0; c < C; ++c) {
                S acc = param(off.wv + c * dt) * embeds[static_cast<size_t>(j)][0];
                for (int e = 1; e < dt; ++e)
                    acc = acc + param(off.wv + c * dt + e) * embeds[static_cast<size_t>(j)][static_cast<size_t>(e)];
                V[static_cast<size_t>(j * C + c)] = acc;
            }
        }

        // queries and logits B = QK^T
        std::vector<S> B(static_cast<size_t>(n_q * n_k), var(0.0));
        std::vector<S> Q(static_cast<size_t>(da), var(0.0));
        for (int p = 0; p < n_q; ++p) {
            for (int a = 0; a < da; ++a) {
                S acc = param(off.ut + a) * tfrac;
                for (int c = 0; c < C; ++c)
                    acc = acc + param(off.wq + a * C + c) * x_t.data[static_cast<size_t>(c * n_q + p)];
                Q[static_cast<size_t>(a)] = acc;
            }
            for (int j = 0; j < n_k; ++j) {
                S acc = Q[0] * K[static_cast<size_t>(j * da)];
                for (int a = 1; a < da; ++a)
                    acc = acc + Q[static_cast<size_t>(a)] * K[static_cast<size_t>(j * da + a)];
                B[static_cast<size_t>(p * n_k + j)] = acc;
            }
        }

        // optional logit modulation (sampling path only; gradients never flow here)
        if constexpr (std::is_same_v<S, double>) {
            if (hook && *hook) {
                AttnContext ctx{t, n_q, n_k, da};
                std::vector<double> delta = (*hook)(ctx, B);
                if (!delta.empty()) {
                    if (delta.size() != B.size())
                        throw ShapeError("attention hook: delta shape mismatch at step t=" +
                                         std::to_string(t) + " (cross-attention layer 0)");
                    for (size_t i = 0; i < B.size(); ++i) B[i] += delta[i];
                }
            }
        }

        // row softmax of B/sqrt(d)
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(da));
        std::vector<S> A(static_cast<size_t>(n_q * n_k), var(0.0));
        for (int p = 0; p < n_q; ++p) {
            double row_max = ad::value_of(B[static_cast<size_t>(p * n_k)]) * inv_sqrt_d;
            for (int j = 1; j < n_k; ++j)
                row_max = std::max(row_max, ad::value_of(B[static_cast<size_t>(p * n_k + j)]) * inv_sqrt_d);
            S denom = var(0.0);
            for (int j = 0; j < n_k; ++j) {
                S e = exp(B[static_cast<size_t>(p * n_k + j)] * inv_sqrt_d - row_max);
                A[static_cast<size_t>(p * n_k + j)] = e;
                denom = denom + e;
            }
            for (int j = 0; j < n_k; ++j)
                A[static_cast<size_t>(p * n_k + j)] = A[static_cast<size_t>(p * n_k + j)] / denom;
        }

        if constexpr (std::is_same_v<S, double>) {
            if (trace) {
                trace->step_t = t;
                trace->n_q = n_q;
                trace->n_k = n_k;
                trace->attn = A;
            }
        }

        // output head per position
        std::vector<S> ctxv(static_cast<size_t>(C), var(0.0));
        std::vector<S> hbuf(static_cast<size_t>(hid), var(0.0));
        for (int p = 0; p < n_q; ++p) {
            for (int c = 0; c < C; ++c) {
                S acc = A[static_cast<size_t>(p * n_k)] * V[static_cast<size_t>(c)];
                for (int j = 1; j < n_k; ++j)
                    acc = acc + A[static_cast<size_t>(p * n_k + j)] * V[static_cast<size_t>(j * C + c)];
                ctxv[static_cast<size_t>(c)] = acc;
            }
            const int in_dim = 2 * C + 1;
            for (int h = 0; h < hid; ++h) {
                S acc = param(off.bh + h);
                for (int c = 0; c < C; ++c)
                    acc = acc + param(off.wh + h * in_dim + c) * x_t.data[static_cast<size_t>(c * n_q + p)];
                for (int c = 0; c < C; ++c)
                    acc = acc + param(off.wh + h * in_dim + C + c) * ctxv[static_cast<size_t>(c)];
                acc = acc + param(off.wh + h * in_dim + 2 * C) * tfrac;
                hbuf[static_cast<size_t>(h)] = tanh(acc);
            }
            for (int c = 0; c < C; ++c) {
                S acc = param(off.bo + c);
                for (int h = 0; h < hid; ++h)
                    acc = acc + param(off.wo + c * hid + h) * hbuf[static_cast<size_t>(h)];
                eps_out[static_cast<size_t>(c * n_q + p)] = acc;
            }
        }
    }

    BackboneConfig cfg_;
    int T_hint_;
    std::vector<double> params_;
};

}  // namespace realign
