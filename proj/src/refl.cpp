#include "realign/refl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "realign/diffusion.hpp"
#include "realign/errors.hpp"
#include "realign/rng.hpp"

namespace realign {

void ReFLConfig::validate() const {
    if (lambda < 0.0) throw ConfigError("ReFLConfig: lambda must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("ReFLConfig: learning_rate must be > 0");
    if (T < 1) throw ConfigError("ReFLConfig: T must be positive");
    if (!(1 <= t_min && t_min <= t_max && t_max <= T))
        throw ConfigError("ReFLConfig: need 1 <= t_min <= t_max <= T");
    if (batch_size < 1) throw ConfigError("ReFLConfig: batch_size must be positive");
    if (max_iterations < 0) throw ConfigError("ReFLConfig: max_iterations must be >= 0");
    if (eval_interval < 1) throw ConfigError("ReFLConfig: eval_interval must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("ReFLConfig: momentum in [0,1)");
}

double AnalyticStubReward::reward(const LatentImage& x0, const Prompt&) const {
    double mean = 0.0;
    for (double v : x0.data) mean += v;
    mean /= static_cast<double>(x0.data.size());
    return -(mean - target_) * (mean - target_);
}

ad::Var AnalyticStubReward::reward_tracked(ad::Tape& tape, const std::vector<ad::Var>& x0,
                                           const std::vector<int64_t>&, const Prompt&) const {
    ad::Var mean(0.0, &tape);
    for (const auto& v : x0) mean = mean + v;
    mean = mean / static_cast<double>(x0.size());
    ad::Var d = mean - target_;
    return -(d * d);
}

int draw_step_t(uint64_t seed, uint64_t iteration, const ReFLConfig& cfg) {
    Rng rng(mix_seed(mix_seed(seed, "refl-t"), std::to_string(iteration)));
    return static_cast<int>(rng.uniform_int(cfg.t_min, cfg.t_max));
}

namespace {

ad::Var map_reward_loss(const ad::Var& r, const RewardLossSpec& spec, ad::Tape& tape,
                        double clamp_abs) {
    ad::Var loss(0.0, &tape);
    switch (spec.map) {
        case RewardLossMap::Negate: loss = -r; break;
        case RewardLossMap::ReluMargin: loss = ad::relu(ad::Var(spec.margin, &tape) - r); break;
        case RewardLossMap::PaperLiteral: loss = ad::relu(r); break;
    }
    // per-sample clamp: saturated samples contribute no gradient
    if (clamp_abs > 0.0 && std::abs(loss.v) > clamp_abs) {
        double c = loss.v > 0.0 ? clamp_abs : -clamp_abs;
        return ad::Var(c, &tape);
    }
    return loss;
}

uint64_t pre_seed(uint64_t seed, uint64_t iteration, size_t index) {
    return mix_seed(mix_seed(mix_seed(seed, "refl-pre"), std::to_string(iteration)),
                    std::to_string(index));
}

uint64_t sampler_seed(uint64_t seed, uint64_t iteration, size_t index) {
    return mix_seed(mix_seed(mix_seed(seed, "refl-sample"), std::to_string(iteration)),
                    std::to_string(index));
}

void accumulate_pretrain(const std::vector<PretrainPair>& pretrain_batch, const TrainState& state,
                         const ToyBackbone& backbone, const NoiseSchedule& schedule,
                         std::vector<double>& grad, double& l_pre) {
    l_pre = 0.0;
    if (pretrain_batch.empty()) return;
    const double inv_n = 1.0 / static_cast<double>(pretrain_batch.size());
    for (size_t i = 0; i < pretrain_batch.size(); ++i) {
        ad::Tape tape;
        auto pvars = backbone.make_param_vars(tape);
        ad::Var loss = denoising_loss_tracked(tape, pvars, backbone, pretrain_batch[i].first,
                                              pretrain_batch[i].second.text, schedule,
                                              pre_seed(state.seed, state.iteration, i));
        l_pre += loss.v * inv_n;
        auto g = tape.backward(loss.idx);
        for (size_t p = 0; p < pvars.size(); ++p)
            grad[p] += inv_n * g[static_cast<size_t>(pvars[p].idx)];
    }
}

void apply_update(TrainState& state, const ReFLConfig& cfg, ToyBackbone& backbone,
                  const std::vector<double>& grad) {
    auto& params = backbone.params();
    if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), 0.0);
    for (size_t p = 0; p < params.size(); ++p) {
        state.velocity[p] = cfg.momentum * state.velocity[p] - cfg.learning_rate * grad[p];
        params[p] += state.velocity[p];
    }
}

}  // namespace

std::vector<LatentImage> refl_intermediate_latents(const std::vector<Prompt>& batch,
                                                   const TrainState& state, int t,
                                                   const ToyBackbone& backbone,
                                                   const NoiseSchedule& schedule) {
    std::vector<LatentImage> xts;
    xts.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        SampleResult pre = sample(batch[i].text, schedule, backbone, nullptr,
                                  sampler_seed(state.seed, state.iteration, i),
                                  backbone.latent_shape(), t, /*collect_traces=*/false);
        xts.push_back(std::move(pre.x0));
    }
    return xts;
}

std::vector<double> refl_gradient(const std::vector<Prompt>& batch,
                                  const std::vector<LatentImage>& xts, int t,
                                  const TrainState& state, const ReFLConfig& cfg,
                                  const DifferentiableReward& reward_fn,
                                  const ToyBackbone& backbone, const NoiseSchedule& schedule,
                                  const std::vector<PretrainPair>& pretrain_batch,
                                  StepMetrics* metrics) {
    if (xts.size() != batch.size())
        throw ShapeError("refl_gradient: latent count does not match batch");
    std::vector<double> grad(backbone.params().size(), 0.0);
    std::vector<double> rewards;
    rewards.reserve(batch.size());
    double reward_loss_sum = 0.0;

    for (size_t i = 0; i < batch.size(); ++i) {
        const Prompt& prompt = batch[i];
        ad::Tape tape;
        auto pvars = backbone.make_param_vars(tape);
        auto eps = backbone.predict_noise_tracked(tape, pvars, xts[i], prompt.text, t);
        auto x0p = predict_x0_tracked(xts[i], eps, t, schedule);
        ad::Var r = reward_fn.reward_tracked(tape, x0p, backbone.latent_shape(), prompt);
        if (!std::isfinite(r.v))
            throw NumericError("refl_gradient: non-finite reward for prompt \"" + prompt.text +
                               "\"");
        rewards.push_back(r.v);
        ad::Var rloss = map_reward_loss(r, cfg.loss_map, tape, cfg.reward_loss_clamp);
        reward_loss_sum += rloss.v;

        if (cfg.lambda != 0.0) {
            auto g = tape.backward(rloss.idx);
            const double scale = cfg.lambda / static_cast<double>(batch.size());
            for (size_t p = 0; p < pvars.size(); ++p)
                grad[p] += scale * g[static_cast<size_t>(pvars[p].idx)];
        }
    }

    double l_pre = 0.0;
    accumulate_pretrain(pretrain_batch, state, backbone, schedule, grad, l_pre);

    if (metrics) {
        double rmean = 0.0;
        for (double r : rewards) rmean += r;
        if (!rewards.empty()) rmean /= static_cast<double>(rewards.size());
        double rvar = 0.0;
        for (double r : rewards) rvar += (r - rmean) * (r - rmean);
        if (rewards.size() > 1) rvar /= static_cast<double>(rewards.size() - 1);
        metrics->t = t;
        metrics->reward_mean = rmean;
        metrics->reward_std = std::sqrt(rvar);
        metrics->l_pre = l_pre;
        metrics->l_total =
            cfg.lambda * reward_loss_sum / static_cast<double>(std::max<size_t>(1, batch.size())) +
            l_pre;
        if (!std::isfinite(metrics->l_total))
            throw NumericError("refl_gradient: non-finite total loss (reward term " +
                               std::to_string(reward_loss_sum) + ", pretrain term " +
                               std::to_string(l_pre) + ")");
    }
    return grad;
}

double refl_total_loss(const std::vector<Prompt>& batch, const std::vector<LatentImage>& xts,
                       int t, const TrainState& state, const ReFLConfig& cfg,
                       const DifferentiableReward& reward_fn, const ToyBackbone& backbone,
                       const NoiseSchedule& schedule,
                       const std::vector<PretrainPair>& pretrain_batch) {
    if (xts.size() != batch.size())
        throw ShapeError("refl_total_loss: latent count does not match batch");
    double reward_loss_sum = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        ad::Tape tape;
        auto pvars = backbone.make_param_vars(tape);
        auto eps = backbone.predict_noise_tracked(tape, pvars, xts[i], batch[i].text, t);
        auto x0p = predict_x0_tracked(xts[i], eps, t, schedule);
        ad::Var r = reward_fn.reward_tracked(tape, x0p, backbone.latent_shape(), batch[i]);
        reward_loss_sum += map_reward_loss(r, cfg.loss_map, tape, cfg.reward_loss_clamp).v;
    }
    double l_pre = 0.0;
    if (!pretrain_batch.empty()) {
        const double inv_n = 1.0 / static_cast<double>(pretrain_batch.size());
        for (size_t i = 0; i < pretrain_batch.size(); ++i) {
            l_pre += inv_n * denoising_loss(pretrain_batch[i].first, pretrain_batch[i].second.text,
                                            schedule, backbone,
                                            pre_seed(state.seed, state.iteration, i));
        }
    }
    return cfg.lambda * reward_loss_sum / static_cast<double>(std::max<size_t>(1, batch.size())) +
           l_pre;
}

StepMetrics refl_step(const std::vector<Prompt>& batch, TrainState& state, const ReFLConfig& cfg,
                      const DifferentiableReward& reward_fn, ToyBackbone& backbone,
                      const NoiseSchedule& schedule,
                      const std::vector<PretrainPair>& pretrain_batch) {
    cfg.validate();
    auto t_start = std::chrono::steady_clock::now();
    StepMetrics m;
    int t = draw_step_t(state.seed, state.iteration, cfg);
    auto xts = refl_intermediate_latents(batch, state, t, backbone, schedule);
    auto grad = refl_gradient(batch, xts, t, state, cfg, reward_fn, backbone, schedule,
                              pretrain_batch, &m);
    apply_update(state, cfg, backbone, grad);
    state.iteration += 1;
    if (cfg.record_wall_time)
        m.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return m;
}

StepMetrics pretrain_step(TrainState& state, const ReFLConfig& cfg, ToyBackbone& backbone,
                          const NoiseSchedule& schedule,
                          const std::vector<PretrainPair>& pretrain_batch) {
    cfg.validate();
    StepMetrics m;
    std::vector<double> grad(backbone.params().size(), 0.0);
    accumulate_pretrain(pretrain_batch, state, backbone, schedule, grad, m.l_pre);
    m.l_total = m.l_pre;
    apply_update(state, cfg, backbone, grad);
    state.iteration += 1;
    return m;
}

std::vector<PretrainPair> synth_pretrain_pairs(const ToyBackbone& backbone, int count,
                                               uint64_t seed) {
    std::vector<PretrainPair> pairs;
    pairs.reserve(static_cast<size_t>(count));
    static const char* nouns[] = {"book", "pen", "car", "tree", "cup", "lamp", "dog", "boat"};
    static const char* colors[] = {"red", "yellow", "blue", "green"};
    Rng rng(mix_seed(seed, "synth-pretrain"));
    for (int i = 0; i < count; ++i) {
        const auto shape = backbone.latent_shape();
        LatentImage img(shape);
        // smooth blob, deterministic per pair
        double cx = rng.uniform() * static_cast<double>(shape[2]);
        double cy = rng.uniform() * static_cast<double>(shape[1]);
        double amp = 0.5 + rng.uniform();
        const int64_t C = shape[0], H = shape[1], W = shape[2];
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double dx = (static_cast<double>(x) - cx) / static_cast<double>(W);
                    double dy = (static_cast<double>(y) - cy) / static_cast<double>(H);
                    img.data[static_cast<size_t>(c * H * W + y * W + x)] =
                        amp * std::exp(-8.0 * (dx * dx + dy * dy)) *
                        (c % 2 == 0 ? 1.0 : -1.0);
                }
        std::string text = std::string("a ") + colors[rng.raw() % 4] + " " + nouns[rng.raw() % 8];
        pairs.emplace_back(std::move(img), Prompt::make(text, "synth-" + std::to_string(i)));
    }
    return pairs;
}

TrainReport train(const std::vector<Prompt>& dataset, const ReFLConfig& cfg, TrainState& state,
                  const DifferentiableReward& reward_fn, ToyBackbone& backbone,
                  const NoiseSchedule& schedule, const std::vector<PretrainPair>& pretrain_source,
                  const std::vector<Prompt>& validation) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("train: dataset is empty");
    TrainReport report;
    if (cfg.max_iterations == 0) return report;

    auto validate_reward = [&]() {
        if (validation.empty()) return 0.0;
        double sum = 0.0;
        for (const auto& p : validation) {
            SampleResult s = sample(p.text, schedule, backbone, nullptr,
                                    mix_seed(mix_seed(state.seed, "refl-val"), p.id),
                                    backbone.latent_shape(), 0, false);
            sum += reward_fn.reward(s.x0, p);
        }
        return sum / static_cast<double>(validation.size());
    };

    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = dataset.size();  // forces initial shuffle
    uint64_t epoch = 0;
    int plateau = 0;
    std::vector<double> best_params = backbone.params();

    for (int it = 0; it < cfg.max_iterations; ++it) {
        std::vector<Prompt> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        while (static_cast<int>(batch.size()) < cfg.batch_size) {
            if (cursor >= order.size()) {
                Rng shuffle_rng(mix_seed(mix_seed(state.seed, "refl-shuffle"),
                                         std::to_string(epoch++)));
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[shuffle_rng.raw() % i]);
                cursor = 0;
            }
            batch.push_back(dataset[order[cursor++]]);
        }

        std::vector<PretrainPair> pre_batch;
        if (!pretrain_source.empty()) {
            Rng pick(mix_seed(mix_seed(state.seed, "refl-prepick"),
                              std::to_string(state.iteration)));
            int n = std::min<int>(cfg.batch_size, static_cast<int>(pretrain_source.size()));
            for (int i = 0; i < n; ++i)
                pre_batch.push_back(pretrain_source[pick.raw() % pretrain_source.size()]);
        }

        StepMetrics m = refl_step(batch, state, cfg, reward_fn, backbone, schedule, pre_batch);
        report.records.push_back({state.iteration, m});
        report.steps_run += 1;

        if (!validation.empty() &&
            (report.steps_run % static_cast<uint64_t>(cfg.eval_interval) == 0 ||
             it + 1 == cfg.max_iterations)) {
            double val = validate_reward();
            report.val_curve.emplace_back(state.iteration, val);
            if (val > state.best_val_reward + cfg.early_stop_min_delta) {
                state.best_val_reward = val;
                best_params = backbone.params();
                plateau = 0;
            } else {
                plateau += 1;
                if (plateau >= cfg.early_stop_patience) {
                    report.early_stopped = true;
                    break;
                }
            }
        }
    }
    if (!validation.empty()) backbone.params() = best_params;
    report.best_val_reward = state.best_val_reward;
    return report;
}

}  // namespace realign
