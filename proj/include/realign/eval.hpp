#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "realign/rewards.hpp"
#include "realign/tensor.hpp"

namespace realign {

struct PromptSet {
    std::string name;  // ms-coco | abc-6k | cc-500 | vilg-300 | custom
    std::vector<Prompt> prompts;
    double train_fraction = 0.8;
    int duplicates_removed = 0;
};

// format: "lines-txt" (one prompt per line) or "caption-json" (id -> caption records)
PromptSet load_prompt_set(const std::string& path, const std::string& format,
                          const std::string& name = "custom");

class MetricClient {
public:
    virtual ~MetricClient() = default;
    virtual std::string metric_name() const = 0;  // fid | clip_score | tifa | ...
    virtual std::string client_id() const = 0;
    virtual bool lower_is_better() const = 0;
    // aggregate value; per_prompt left empty for set-level metrics
    virtual double evaluate(const std::vector<LatentImage>& images,
                            const std::vector<Prompt>& prompts,
                            std::vector<double>* per_prompt) const = 0;
};

struct MetricResult {
    double value = 0.0;
    bool available = false;
    bool lower_is_better = false;
    std::string client_id;
    std::string error;  // populated when unavailable
};

struct EvalReport {
    std::string prompt_set_name;
    std::map<std::string, MetricResult> metrics;
    std::vector<std::string> prompt_ids;
    std::map<std::string, std::vector<double>> per_prompt;  // metric -> scores per prompt
    uint64_t config_hash = 0;
    double wall_time_s = 0.0;
    int image_count = 0;
};

// images[i] pairs with prompts[i]; metric client failures mark the metric
// unavailable rather than fabricating a value.
EvalReport evaluate(const std::vector<LatentImage>& images, const PromptSet& prompts,
                    const std::vector<const MetricClient*>& metric_clients,
                    bool record_wall_time = true);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);

struct ComparisonTable {
    std::vector<std::string> metric_names;
    std::vector<std::string> report_labels;
    std::vector<std::vector<std::optional<double>>> values;  // [report][metric]
    std::vector<int> best_row_per_metric;  // -1 when undecided (single report / no data)
    std::string render() const;
};

ComparisonTable compare(const std::vector<EvalReport>& reports,
                        const std::vector<std::string>& labels = {});

// --- deterministic stub metric clients -----------------------------------

class ConstantMetric : public MetricClient {
public:
    ConstantMetric(std::string name, double value, bool lower = false)
        : name_(std::move(name)), value_(value), lower_(lower) {}
    std::string metric_name() const override { return name_; }
    std::string client_id() const override { return "stub-constant"; }
    bool lower_is_better() const override { return lower_; }
    double evaluate(const std::vector<LatentImage>&, const std::vector<Prompt>& prompts,
                    std::vector<double>* per_prompt) const override {
        if (per_prompt) per_prompt->assign(prompts.size(), value_);
        return value_;
    }

private:
    std::string name_;
    double value_;
    bool lower_;
};

// Cosine between a hashed text embedding of the prompt and a pseudo image
// embedding projected from pixel statistics.
class StubClipMetric : public MetricClient {
public:
    explicit StubClipMetric(int dim = 16) : dim_(dim) {}
    std::string metric_name() const override { return "clip_score"; }
    std::string client_id() const override { return "stub-clip-d" + std::to_string(dim_); }
    bool lower_is_better() const override { return false; }
    double evaluate(const std::vector<LatentImage>& images, const std::vector<Prompt>& prompts,
                    std::vector<double>* per_prompt) const override;
    double score_one(const LatentImage& image, const Prompt& prompt) const;

private:
    int dim_;
};

// Distance between image-set moment statistics and reference statistics.
class StubFidMetric : public MetricClient {
public:
    StubFidMetric(double ref_mean, double ref_var) : ref_mean_(ref_mean), ref_var_(ref_var) {}
    static StubFidMetric from_stats_file(const std::string& path);
    std::string metric_name() const override { return "fid"; }
    std::string client_id() const override { return "stub-fid-moments"; }
    bool lower_is_better() const override { return true; }
    double evaluate(const std::vector<LatentImage>& images, const std::vector<Prompt>&,
                    std::vector<double>* per_prompt) const override;

private:
    double ref_mean_, ref_var_;
};

class StubTifaMetric : public MetricClient {
public:
    std::string metric_name() const override { return "tifa"; }
    std::string client_id() const override { return "stub-tifa-digest"; }
    bool lower_is_better() const override { return false; }
    double evaluate(const std::vector<LatentImage>& images, const std::vector<Prompt>& prompts,
                    std::vector<double>* per_prompt) const override;
};

// Always throws; used to exercise the partial-report path.
class FailingMetric : public MetricClient {
public:
    explicit FailingMetric(std::string name) : name_(std::move(name)) {}
    std::string metric_name() const override { return name_; }
    std::string client_id() const override { return "stub-failing"; }
    bool lower_is_better() const override { return false; }
    double evaluate(const std::vector<LatentImage>&, const std::vector<Prompt>&,
                    std::vector<double>*) const override;

private:
    std::string name_;
};

}  // namespace realign
