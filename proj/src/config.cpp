#include "realign/config.hpp"

#include <json.hpp>

#include "realign/errors.hpp"
#include "realign/io.hpp"
#include "realign/rng.hpp"

namespace realign {

ModulationConfig RunConfig::modulation() const {
    ModulationConfig m;
    m.lambda_0 = lambda0;
    m.T = refl.T;
    m.b_norm = (b_norm == "raw") ? BNormMode::Raw : BNormMode::MinMax;
    m.extrema = (extrema == "per-row") ? ExtremaMode::PerRow : ExtremaMode::Global;
    return m;
}

void RunConfig::validate() const {
    if (refl.lambda < 0.0) throw ConfigError("config field `lambda`: must be >= 0");
    if (refl.learning_rate <= 0.0) throw ConfigError("config field `learning_rate`: must be > 0");
    if (refl.T < 1) throw ConfigError("config field `T`: must be positive");
    if (!(1 <= refl.t_min && refl.t_min <= refl.t_max && refl.t_max <= refl.T))
        throw ConfigError("config fields `t_min`/`t_max`: need 1 <= t_min <= t_max <= T");
    if (refl.batch_size < 1) throw ConfigError("config field `batch_size`: must be positive");
    if (refl.max_iterations < 0) throw ConfigError("config field `max_iterations`: must be >= 0");
    if (refl.eval_interval < 1) throw ConfigError("config field `eval_interval`: must be positive");
    if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0))
        throw ConfigError("config fields `beta_start`/`beta_end`: must lie in (0,1)");
    if (lambda0 < 0.0) throw ConfigError("config field `lambda0`: must be >= 0");
    if (b_norm != "minmax" && b_norm != "raw")
        throw ConfigError("config field `b_norm`: expected minmax|raw");
    if (extrema != "global" && extrema != "per-row")
        throw ConfigError("config field `extrema`: expected global|per-row");
    if (reward != "analytic")
        throw ConfigError("config field `reward`: only `analytic` is differentiable for training");
    if (backbone.channels < 1 || backbone.height < 1 || backbone.width < 1 ||
        backbone.d_attn < 1 || backbone.d_txt < 1 || backbone.hidden < 1)
        throw ConfigError("config field `backbone`: all dimensions must be positive");
}

namespace {
template <class T>
T field(const nlohmann::json& j, const char* name, T fallback) {
    if (!j.contains(name)) return fallback;
    try {
        return j.at(name).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config field `") + name + "`: wrong type");
    }
}
}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    RunConfig c;
    c.refl.lambda = field<double>(j, "lambda", c.refl.lambda);
    c.refl.T = field<int>(j, "T", c.refl.T);
    c.refl.t_min = field<int>(j, "t_min", c.refl.t_min);
    c.refl.t_max = field<int>(j, "t_max", std::min(c.refl.t_max, c.refl.T));
    c.refl.learning_rate = field<double>(j, "learning_rate", c.refl.learning_rate);
    c.refl.momentum = field<double>(j, "momentum", c.refl.momentum);
    c.refl.batch_size = field<int>(j, "batch_size", c.refl.batch_size);
    c.refl.max_iterations = field<int>(j, "max_iterations", c.refl.max_iterations);
    c.refl.eval_interval = field<int>(j, "eval_interval", c.refl.eval_interval);
    c.refl.early_stop_patience = field<int>(j, "early_stop_patience", c.refl.early_stop_patience);
    c.refl.early_stop_min_delta =
        field<double>(j, "early_stop_min_delta", c.refl.early_stop_min_delta);
    c.refl.reward_loss_clamp = field<double>(j, "reward_loss_clamp", c.refl.reward_loss_clamp);
    c.refl.loss_map = RewardLossSpec::parse(field<std::string>(j, "loss_map", "negate"),
                                            field<double>(j, "loss_margin", 1.0));
    c.beta_start = field<double>(j, "beta_start", c.beta_start);
    c.beta_end = field<double>(j, "beta_end", c.beta_end);
    c.backbone_init_seed = field<uint64_t>(j, "backbone_init_seed", c.backbone_init_seed);
    c.reward = field<std::string>(j, "reward", c.reward);
    c.reward_target = field<double>(j, "reward_target", c.reward_target);
    c.lambda0 = field<double>(j, "lambda0", c.lambda0);
    c.b_norm = field<std::string>(j, "b_norm", c.b_norm);
    c.extrema = field<std::string>(j, "extrema", c.extrema);
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        c.backbone.channels = field<int>(b, "channels", c.backbone.channels);
        c.backbone.height = field<int>(b, "height", c.backbone.height);
        c.backbone.width = field<int>(b, "width", c.backbone.width);
        c.backbone.d_attn = field<int>(b, "d_attn", c.backbone.d_attn);
        c.backbone.d_txt = field<int>(b, "d_txt", c.backbone.d_txt);
        c.backbone.hidden = field<int>(b, "hidden", c.backbone.hidden);
        c.backbone.max_tokens = field<int>(b, "max_tokens", c.backbone.max_tokens);
    }
    if (j.contains("dataset")) {
        DatasetRef d;
        d.path = field<std::string>(j.at("dataset"), "path", "");
        d.format = field<std::string>(j.at("dataset"), "format", "lines-txt");
        if (d.path.empty()) throw ConfigError("config field `dataset.path`: required");
        c.dataset = d;
    }
    if (j.contains("validation")) {
        DatasetRef d;
        d.path = field<std::string>(j.at("validation"), "path", "");
        d.format = field<std::string>(j.at("validation"), "format", "lines-txt");
        if (d.path.empty()) throw ConfigError("config field `validation.path`: required");
        c.validation = d;
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(read_file(path));
}

std::string config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["lambda"] = c.refl.lambda;
    j["T"] = c.refl.T;
    j["t_min"] = c.refl.t_min;
    j["t_max"] = c.refl.t_max;
    j["learning_rate"] = c.refl.learning_rate;
    j["momentum"] = c.refl.momentum;
    j["batch_size"] = c.refl.batch_size;
    j["max_iterations"] = c.refl.max_iterations;
    j["eval_interval"] = c.refl.eval_interval;
    j["early_stop_patience"] = c.refl.early_stop_patience;
    j["early_stop_min_delta"] = c.refl.early_stop_min_delta;
    j["reward_loss_clamp"] = c.refl.reward_loss_clamp;
    j["loss_map"] = c.refl.loss_map.name();
    j["loss_margin"] = c.refl.loss_map.margin;
    j["beta_start"] = c.beta_start;
    j["beta_end"] = c.beta_end;
    j["backbone_init_seed"] = c.backbone_init_seed;
    j["reward"] = c.reward;
    j["reward_target"] = c.reward_target;
    j["lambda0"] = c.lambda0;
    j["b_norm"] = c.b_norm;
    j["extrema"] = c.extrema;
    j["backbone"] = {{"channels", c.backbone.channels}, {"height", c.backbone.height},
                     {"width", c.backbone.width},       {"d_attn", c.backbone.d_attn},
                     {"d_txt", c.backbone.d_txt},       {"hidden", c.backbone.hidden},
                     {"max_tokens", c.backbone.max_tokens}};
    if (c.dataset) j["dataset"] = {{"path", c.dataset->path}, {"format", c.dataset->format}};
    if (c.validation)
        j["validation"] = {{"path", c.validation->path}, {"format", c.validation->format}};
    return j.dump();
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a(config_to_json(cfg)); }

}  // namespace realign
