#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "realign/autodiff.hpp"
#include "realign/backbone.hpp"
#include "realign/rng.hpp"
#include "realign/schedule.hpp"
#include "realign/tensor.hpp"

namespace realign {

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise
LatentImage forward_noise(const LatentImage& x0, int t, const NoiseSchedule& schedule,
                          const LatentImage& noise);

// x0' = (x_t - sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_bar_t)
LatentImage predict_x0(const LatentImage& xt, const LatentImage& eps_pred, int t,
                       const NoiseSchedule& schedule);

// tracked variant; xt is constant, gradient flows through eps_pred
std::vector<ad::Var> predict_x0_tracked(const LatentImage& xt,
                                        const std::vector<ad::Var>& eps_pred, int t,
                                        const NoiseSchedule& schedule);

LatentImage gaussian_latent(const std::vector<int64_t>& shape, Rng& rng);

// ||eps - eps_theta(x_t, prompt, t)||^2 with t drawn uniformly from {1..T}
double denoising_loss(const LatentImage& x0, const std::string& prompt,
                      const NoiseSchedule& schedule, const DenoiserInterface& denoiser,
                      uint64_t seed);

// tracked variant used by the trainer; same RNG consumption as the plain one
ad::Var denoising_loss_tracked(ad::Tape& tape, const std::vector<ad::Var>& pvars,
                               const ToyBackbone& backbone, const LatentImage& x0,
                               const std::string& prompt, const NoiseSchedule& schedule,
                               uint64_t seed);

struct SampleResult {
    LatentImage x0;
    std::vector<AttnTrace> traces;  // one per denoising step, in step order T..stop+1
};

// Reverse process x_T -> x_0 (or down to x_{stop_at_t} when stop_at_t > 0).
// Variance is fixed to beta_t. Each cross-attention evaluation routes through
// `hook` when installed.
SampleResult sample(const std::string& prompt, const NoiseSchedule& schedule,
                    const DenoiserInterface& denoiser, const AttnHook* hook, uint64_t seed,
                    const std::vector<int64_t>& latent_shape, int stop_at_t = 0,
                    bool collect_traces = true);

}  // namespace realign
