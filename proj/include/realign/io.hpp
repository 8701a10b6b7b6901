#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "realign/backbone.hpp"
#include "realign/refl.hpp"
#include "realign/schedule.hpp"
#include "realign/tensor.hpp"

namespace realign {

// Dense tensor container ("RTEN"): magic, version, ndim, dims, raw doubles.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Self-describing checkpoint ("RLCK"): schedule, parameters, optimizer state,
// step counter, config hash. save -> load -> save is byte-identical.
struct Checkpoint {
    uint64_t config_hash = 0;
    TrainState state;
    std::vector<double> betas;
    std::vector<double> params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Attention traces as tensor files plus a sidecar manifest (layer, step, shape).
void export_attention_traces(const std::string& dir, const std::string& stem,
                             const std::vector<AttnTrace>& traces);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace realign
