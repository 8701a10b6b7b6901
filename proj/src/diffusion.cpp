#include "realign/diffusion.hpp"

#include <cmath>

#include "realign/errors.hpp"

namespace realign {

LatentImage forward_noise(const LatentImage& x0, int t, const NoiseSchedule& schedule,
                          const LatentImage& noise) {
    if (t < 1 || t > schedule.T())
        throw RangeError("forward_noise: t=" + std::to_string(t) + " outside 1.." +
                         std::to_string(schedule.T()));
    require_same_shape(x0, noise, "forward_noise");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    LatentImage xt(x0.shape);
    for (size_t i = 0; i < x0.data.size(); ++i) xt.data[i] = a * x0.data[i] + b * noise.data[i];
    return xt;
}

LatentImage predict_x0(const LatentImage& xt, const LatentImage& eps_pred, int t,
                       const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.T())
        throw RangeError("predict_x0: t=" + std::to_string(t) + " outside 1.." +
                         std::to_string(schedule.T()));
    require_same_shape(xt, eps_pred, "predict_x0");
    const double ab = schedule.alpha_bar(t);
    if (ab == 0.0) throw NumericError("predict_x0: alpha_bar(t) = 0, inversion is singular");
    const double inv_a = 1.0 / std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    LatentImage x0(xt.shape);
    for (size_t i = 0; i < xt.data.size(); ++i)
        x0.data[i] = (xt.data[i] - b * eps_pred.data[i]) * inv_a;
    return x0;
}

std::vector<ad::Var> predict_x0_tracked(const LatentImage& xt,
                                        const std::vector<ad::Var>& eps_pred, int t,
                                        const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.T())
        throw RangeError("predict_x0_tracked: t outside 1..T");
    if (eps_pred.size() != xt.data.size())
        throw ShapeError("predict_x0_tracked: eps_pred size mismatch");
    const double ab = schedule.alpha_bar(t);
    if (ab == 0.0) throw NumericError("predict_x0_tracked: alpha_bar(t) = 0");
    const double inv_a = 1.0 / std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    std::vector<ad::Var> x0;
    x0.reserve(eps_pred.size());
    for (size_t i = 0; i < eps_pred.size(); ++i)
        x0.push_back((xt.data[i] - eps_pred[i] * b) * inv_a);
    return x0;
}

LatentImage gaussian_latent(const std::vector<int64_t>& shape, Rng& rng) {
    LatentImage x(shape);
    for (double& v : x.data) v = rng.normal();
    return x;
}

namespace {
// Shared draw so the plain and tracked loss consume RNG identically.
struct LossDraw {
    int t;
    LatentImage noise;
    LatentImage xt;
};

LossDraw draw_for_loss(const LatentImage& x0, const NoiseSchedule& schedule, uint64_t seed) {
    Rng rng(mix_seed(seed, "denoising-loss"));
    LossDraw d;
    d.t = static_cast<int>(rng.uniform_int(1, schedule.T()));
    d.noise = gaussian_latent(x0.shape, rng);
    d.xt = forward_noise(x0, d.t, schedule, d.noise);
    return d;
}
}  // namespace

double denoising_loss(const LatentImage& x0, const std::string& prompt,
                      const NoiseSchedule& schedule, const DenoiserInterface& denoiser,
                      uint64_t seed) {
    LossDraw d = draw_for_loss(x0, schedule, seed);
    Tensor eps_hat = denoiser.predict_noise(d.xt, prompt, d.t);
    if (!eps_hat.all_finite()) throw NumericError("denoising_loss: non-finite denoiser output");
    double loss = 0.0;
    for (size_t i = 0; i < d.noise.data.size(); ++i) {
        double r = d.noise.data[i] - eps_hat.data[i];
        loss += r * r;
    }
    return loss;
}

ad::Var denoising_loss_tracked(ad::Tape& tape, const std::vector<ad::Var>& pvars,
                               const ToyBackbone& backbone, const LatentImage& x0,
                               const std::string& prompt, const NoiseSchedule& schedule,
                               uint64_t seed) {
    LossDraw d = draw_for_loss(x0, schedule, seed);
    std::vector<ad::Var> eps_hat = backbone.predict_noise_tracked(tape, pvars, d.xt, prompt, d.t);
    ad::Var loss(0.0, &tape);
    for (size_t i = 0; i < eps_hat.size(); ++i) {
        ad::Var r = eps_hat[i] - d.noise.data[i];
        loss = loss + r * r;
    }
    if (!std::isfinite(loss.v)) throw NumericError("denoising_loss_tracked: non-finite loss");
    return loss;
}

SampleResult sample(const std::string& prompt, const NoiseSchedule& schedule,
                    const DenoiserInterface& denoiser, const AttnHook* hook, uint64_t seed,
                    const std::vector<int64_t>& latent_shape, int stop_at_t,
                    bool collect_traces) {
    const int T = schedule.T();
    if (stop_at_t < 0 || stop_at_t > T)
        throw RangeError("sample: stop_at_t outside 0..T");
    Rng rng(mix_seed(seed, "sampler"));
    SampleResult res;
    LatentImage x = gaussian_latent(latent_shape, rng);
    for (int t = T; t > stop_at_t; --t) {
        AttnTrace trace;
        Tensor eps_hat =
            denoiser.predict_noise(x, prompt, t, hook, collect_traces ? &trace : nullptr);
        if (!eps_hat.all_finite())
            throw NumericError("sample: non-finite denoiser output at t=" + std::to_string(t));
        const double beta = schedule.beta(t);
        const double alpha = 1.0 - beta;
        const double ab = schedule.alpha_bar(t);
        const double coef = beta / std::sqrt(1.0 - ab);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        const double sigma = std::sqrt(beta);
        for (size_t i = 0; i < x.data.size(); ++i) {
            double mean = (x.data[i] - coef * eps_hat.data[i]) * inv_sqrt_alpha;
            x.data[i] = (t > 1) ? mean + sigma * rng.normal() : mean;
        }
        if (collect_traces) res.traces.push_back(std::move(trace));
    }
    res.x0 = std::move(x);
    return res;
}

}  // namespace realign
