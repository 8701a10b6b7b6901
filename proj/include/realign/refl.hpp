#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "realign/autodiff.hpp"
#include "realign/backbone.hpp"
#include "realign/rewards.hpp"
#include "realign/schedule.hpp"
#include "realign/tensor.hpp"

namespace realign {

struct ReFLConfig {
    double lambda = 1e-3;
    int T = 50;
    int t_min = 30;
    int t_max = 50;
    double learning_rate = 1e-5;
    double momentum = 0.9;
    int batch_size = 128;
    int max_iterations = 1000;
    int eval_interval = 10;
    int early_stop_patience = 5;
    double early_stop_min_delta = 1e-4;
    // per-sample clamp on the reward-loss term; <= 0 disables
    double reward_loss_clamp = 0.0;
    RewardLossSpec loss_map;
    bool record_wall_time = true;

    void validate() const;
};

// Reward usable inside the ReFL objective: differentiable along the image path.
class DifferentiableReward {
public:
    virtual ~DifferentiableReward() = default;
    virtual double reward(const LatentImage& x0, const Prompt& prompt) const = 0;
    virtual ad::Var reward_tracked(ad::Tape& tape, const std::vector<ad::Var>& x0,
                                   const std::vector<int64_t>& shape,
                                   const Prompt& prompt) const = 0;
    virtual std::string name() const = 0;
};

// Analytic toy reward: negative squared distance of the latent mean to a target.
class AnalyticStubReward : public DifferentiableReward {
public:
    explicit AnalyticStubReward(double target = 0.5) : target_(target) {}
    double reward(const LatentImage& x0, const Prompt&) const override;
    ad::Var reward_tracked(ad::Tape& tape, const std::vector<ad::Var>& x0,
                           const std::vector<int64_t>&, const Prompt&) const override;
    std::string name() const override { return "analytic-mean-target"; }

private:
    double target_;
};

struct TrainState {
    uint64_t seed = 42;
    uint64_t iteration = 0;
    double best_val_reward = -std::numeric_limits<double>::infinity();
    std::vector<double> velocity;  // momentum buffer, sized lazily
    uint64_t config_hash = 0;
};

struct StepMetrics {
    int t = 0;
    double reward_mean = 0.0;
    double reward_std = 0.0;
    double l_pre = 0.0;
    double l_total = 0.0;
    double wall_time_s = 0.0;
};

using PretrainPair = std::pair<LatentImage, Prompt>;

// One ReFL update (Eq.-5-style objective): sample to a random intermediate step
// without gradient tracking, take one tracked denoiser evaluation at that step,
// map the reward on the one-step x0 estimate into a loss, add the pre-training
// denoising loss, and apply one SGD-with-momentum update.
StepMetrics refl_step(const std::vector<Prompt>& batch, TrainState& state, const ReFLConfig& cfg,
                      const DifferentiableReward& reward_fn, ToyBackbone& backbone,
                      const NoiseSchedule& schedule, const std::vector<PretrainPair>& pretrain_batch);

// Pure pre-training update (denoising objective only), consuming the same
// pretrain RNG sub-streams as refl_step at the same iteration.
StepMetrics pretrain_step(TrainState& state, const ReFLConfig& cfg, ToyBackbone& backbone,
                          const NoiseSchedule& schedule, const std::vector<PretrainPair>& pretrain_batch);

// Draws the intermediate step for a given iteration; exposed for the
// distribution tests.
int draw_step_t(uint64_t seed, uint64_t iteration, const ReFLConfig& cfg);

// The x_t latents refl_step would produce for this batch at state.iteration
// (sampler prefix, no gradient tracking).
std::vector<LatentImage> refl_intermediate_latents(const std::vector<Prompt>& batch,
                                                   const TrainState& state, int t,
                                                   const ToyBackbone& backbone,
                                                   const NoiseSchedule& schedule);

// Objective value at the current parameters with x_t held fixed and the same
// frozen pretrain draws refl_step uses; no update applied.
double refl_total_loss(const std::vector<Prompt>& batch, const std::vector<LatentImage>& xts,
                       int t, const TrainState& state, const ReFLConfig& cfg,
                       const DifferentiableReward& reward_fn, const ToyBackbone& backbone,
                       const NoiseSchedule& schedule,
                       const std::vector<PretrainPair>& pretrain_batch);

// Gradient of refl_total_loss w.r.t. the backbone parameters.
std::vector<double> refl_gradient(const std::vector<Prompt>& batch,
                                  const std::vector<LatentImage>& xts, int t,
                                  const TrainState& state, const ReFLConfig& cfg,
                                  const DifferentiableReward& reward_fn,
                                  const ToyBackbone& backbone, const NoiseSchedule& schedule,
                                  const std::vector<PretrainPair>& pretrain_batch,
                                  StepMetrics* metrics = nullptr);

struct IterRecord {
    uint64_t iteration;
    StepMetrics metrics;
};

struct TrainReport {
    std::vector<IterRecord> records;
    std::vector<std::pair<uint64_t, double>> val_curve;  // (iteration, mean val reward)
    uint64_t steps_run = 0;
    bool early_stopped = false;
    double best_val_reward = -std::numeric_limits<double>::infinity();
};

TrainReport train(const std::vector<Prompt>& dataset, const ReFLConfig& cfg, TrainState& state,
                  const DifferentiableReward& reward_fn, ToyBackbone& backbone,
                  const NoiseSchedule& schedule, const std::vector<PretrainPair>& pretrain_source,
                  const std::vector<Prompt>& validation);

// Procedurally synthesized toy (image, prompt) pairs for the regularizer.
std::vector<PretrainPair> synth_pretrain_pairs(const ToyBackbone& backbone, int count,
                                               uint64_t seed);

}  // namespace realign
