#pragma once

#include <cmath>
#include <vector>

#include "realign/errors.hpp"

namespace realign {

// Variance schedule and derived cumulative products for the forward/reverse process.
// alpha_bar(t) = prod_{s<=t} (1 - beta_s), with alpha_bar(0) = 1 by convention.
class NoiseSchedule {
public:
    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        alpha_bars_.reserve(betas_.size() + 1);
        alpha_bars_.push_back(1.0);
        double prod = 1.0;
        for (double b : betas_) {
            if (!(b >= 0.0 && b < 1.0))
                throw ConfigError("NoiseSchedule: every beta must lie in [0,1)");
            prod *= (1.0 - b);
            alpha_bars_.push_back(prod);
        }
    }

    // default: linear beta 1e-4..2e-2 over T steps
    static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (T < 1) throw ConfigError("NoiseSchedule: T must be positive");
        std::vector<double> betas(static_cast<size_t>(T));
        for (int t = 0; t < T; ++t) {
            double frac = (T == 1) ? 0.0 : static_cast<double>(t) / (T - 1);
            betas[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        }
        return NoiseSchedule(std::move(betas));
    }

    int T() const { return static_cast<int>(betas_.size()); }

    // t in 1..T
    double beta(int t) const {
        check_t(t);
        return betas_[static_cast<size_t>(t - 1)];
    }
    double alpha(int t) const { return 1.0 - beta(t); }

    // t in 0..T
    double alpha_bar(int t) const {
        if (t < 0 || t > T()) throw RangeError("NoiseSchedule: t out of range 0..T");
        return alpha_bars_[static_cast<size_t>(t)];
    }

    const std::vector<double>& betas() const { return betas_; }

private:
    void check_t(int t) const {
        if (t < 1 || t > T()) throw RangeError("NoiseSchedule: t out of range 1..T");
    }

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

}  // namespace realign
