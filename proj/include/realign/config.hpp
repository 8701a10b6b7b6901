#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "realign/attnmod.hpp"
#include "realign/backbone.hpp"
#include "realign/refl.hpp"

namespace realign {

struct DatasetRef {
    std::string path;
    std::string format = "lines-txt";
};

// Declarative run configuration mirroring the trainer/backbone/modulation knobs.
struct RunConfig {
    ReFLConfig refl;
    BackboneConfig backbone;
    uint64_t backbone_init_seed = 7;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::string reward = "analytic";  // training reward (differentiable)
    double reward_target = 0.5;
    double lambda0 = 1.0;  // modulation strength for refine
    std::string b_norm = "minmax";  // minmax | raw
    std::string extrema = "global";  // global | per-row
    std::optional<DatasetRef> dataset;
    std::optional<DatasetRef> validation;

    ModulationConfig modulation() const;
    void validate() const;  // throws ConfigError naming the offending field
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Stable hash of the canonical serialized form; embedded in checkpoints,
// reports, and run records.
uint64_t config_hash(const RunConfig& cfg);
std::string config_to_json(const RunConfig& cfg);

}  // namespace realign
