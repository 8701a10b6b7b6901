#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "realign/errors.hpp"
#include "realign/rng.hpp"
#include "realign/tensor.hpp"

namespace realign {

struct Prompt {
    std::string text;
    std::string id;

    static Prompt make(std::string text, std::string id = "") {
        size_t b = text.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) throw ConfigError("Prompt: empty after trimming");
        size_t e = text.find_last_not_of(" \t\r\n");
        std::string trimmed = text.substr(b, e - b + 1);
        if (id.empty()) id = hex64(fnv1a(trimmed));
        return Prompt{std::move(trimmed), std::move(id)};
    }
};

struct Caption {
    std::string text;
    std::string source;  // which captioner produced it
};

class CaptionerClient {
public:
    virtual ~CaptionerClient() = default;
    virtual Caption caption(const LatentImage& image, const Prompt& prompt) const = 0;
    virtual std::string model_id() const = 0;
};

class TextEncoderClient {
public:
    virtual ~TextEncoderClient() = default;
    virtual std::vector<double> encode(const std::string& text) const = 0;
    virtual std::string model_id() const = 0;
};

class ImageTextScorerClient {
public:
    virtual ~ImageTextScorerClient() = default;
    // score already normalized into [-1, 1]
    virtual double score(const LatentImage& image, const Prompt& prompt) const = 0;
    virtual std::string backend() const = 0;
};

struct RewardScore {
    double value = 0.0;
    std::string reward_name;
    std::string inputs_digest;  // records caption text and model ids
};

// --- deterministic stubs -------------------------------------------------

// Echoes the prompt back as the caption.
class EchoCaptioner : public CaptionerClient {
public:
    Caption caption(const LatentImage&, const Prompt& prompt) const override {
        return Caption{prompt.text, model_id()};
    }
    std::string model_id() const override { return "stub-captioner-echo"; }
};

// Describes the image by bucketing simple pixel statistics into a fixed phrasebook.
class StatsCaptioner : public CaptionerClient {
public:
    Caption caption(const LatentImage& image, const Prompt& prompt) const override;
    std::string model_id() const override { return "stub-captioner-stats"; }
};

// Hashed bag-of-words sentence embedding, pooled by mean. Identical strings map
// to identical vectors; dimension fixed per client.
class HashedBowEncoder : public TextEncoderClient {
public:
    explicit HashedBowEncoder(int dim = 32) : dim_(dim) {}
    std::vector<double> encode(const std::string& text) const override;
    std::string model_id() const override {
        return "stub-encoder-hashed-bow-mean-d" + std::to_string(dim_);
    }

private:
    int dim_;
};

// Fixed lookup table encoder for hand-constructed fixtures.
class TableEncoder : public TextEncoderClient {
public:
    void set(const std::string& text, std::vector<double> vec) { table_[text] = std::move(vec); }
    std::vector<double> encode(const std::string& text) const override {
        auto it = table_.find(text);
        if (it == table_.end()) throw ClientError("TableEncoder: no embedding for \"" + text + "\"");
        return it->second;
    }
    std::string model_id() const override { return "stub-encoder-table"; }

private:
    std::map<std::string, std::vector<double>> table_;
};

class ConstantScorer : public ImageTextScorerClient {
public:
    ConstantScorer(double value, std::string backend) : value_(value), backend_(std::move(backend)) {}
    double score(const LatentImage&, const Prompt&) const override { return value_; }
    std::string backend() const override { return backend_; }

private:
    double value_;
    std::string backend_;
};

// Scores by pixel-mean distance to a target value: 1 at the target, -1 at the
// configured maximal distance.
class PixelMeanScorer : public ImageTextScorerClient {
public:
    PixelMeanScorer(double target, double max_dist, std::string backend)
        : target_(target), max_dist_(max_dist), backend_(std::move(backend)) {}
    double score(const LatentImage& image, const Prompt&) const override;
    std::string backend() const override { return backend_; }

private:
    double target_;
    double max_dist_;
    std::string backend_;
};

// --- operations ----------------------------------------------------------

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

RewardScore caption_reward(const Prompt& prompt, const LatentImage& image,
                           const CaptionerClient& captioner, const TextEncoderClient& encoder);

RewardScore embedding_reward(const Prompt& prompt, const LatentImage& image,
                             const ImageTextScorerClient& scorer);

enum class RewardLossMap { Negate, ReluMargin, PaperLiteral };

struct RewardLossSpec {
    RewardLossMap map = RewardLossMap::Negate;
    double margin = 1.0;  // used by ReluMargin

    static RewardLossSpec parse(const std::string& name, double margin = 1.0);
    std::string name() const;
};

double reward_to_loss(const RewardScore& r, const RewardLossSpec& spec);

}  // namespace realign
