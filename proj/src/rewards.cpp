#include "realign/rewards.hpp"

#include <algorithm>
#include <cmath>

#include "realign/backbone.hpp"

namespace realign {

Caption StatsCaptioner::caption(const LatentImage& image, const Prompt&) const {
    double mean = 0.0;
    for (double v : image.data) mean += v;
    mean /= static_cast<double>(image.data.size());
    double var = 0.0;
    for (double v : image.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(image.data.size());

    static const char* brightness[] = {"a dark", "a dim", "a plain", "a bright", "a glowing"};
    static const char* texture[] = {"flat", "smooth", "textured", "noisy"};
    int bi = std::clamp(static_cast<int>((mean + 1.0) * 2.5), 0, 4);
    int ti = std::clamp(static_cast<int>(var * 4.0), 0, 3);
    return Caption{std::string(brightness[bi]) + " " + texture[ti] + " scene", model_id()};
}

std::vector<double> HashedBowEncoder::encode(const std::string& text) const {
    std::vector<double> acc(static_cast<size_t>(dim_), 0.0);
    auto toks = tokenize(text);
    for (const auto& tok : toks) {
        Rng rng(mix_seed(fnv1a(tok), "hashed-bow"));
        for (double& v : acc) v += rng.normal();
    }
    for (double& v : acc) v /= static_cast<double>(toks.size());
    return acc;
}

double PixelMeanScorer::score(const LatentImage& image, const Prompt&) const {
    double mean = 0.0;
    for (double v : image.data) mean += v;
    mean /= static_cast<double>(image.data.size());
    double d = std::min(std::abs(mean - target_), max_dist_);
    return 1.0 - 2.0 * d / max_dist_;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw NumericError("cosine_similarity: zero-norm embedding (degenerate)");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

RewardScore caption_reward(const Prompt& prompt, const LatentImage& image,
                           const CaptionerClient& captioner, const TextEncoderClient& encoder) {
    if (!image.all_finite()) throw NumericError("caption_reward: non-finite image");
    Caption cap = captioner.caption(image, prompt);
    double value;
    if (cap.text == prompt.text) {
        value = 1.0;  // identical texts, exact by definition
    } else {
        value = cosine_similarity(encoder.encode(cap.text), encoder.encode(prompt.text));
    }
    RewardScore r;
    r.value = value;
    r.reward_name = "caption";
    r.inputs_digest = "caption=\"" + cap.text + "\";captioner=" + captioner.model_id() +
                      ";encoder=" + encoder.model_id();
    return r;
}

RewardScore embedding_reward(const Prompt& prompt, const LatentImage& image,
                             const ImageTextScorerClient& scorer) {
    const std::string be = scorer.backend();
    if (be != "clip" && be != "blip" && be != "imagereward")
        throw ConfigError("embedding_reward: unknown backend \"" + be +
                          "\" (expected clip|blip|imagereward)");
    RewardScore r;
    r.value = std::clamp(scorer.score(image, prompt), -1.0, 1.0);
    r.reward_name = be;
    r.inputs_digest = "backend=" + be;
    return r;
}

RewardLossSpec RewardLossSpec::parse(const std::string& name, double margin) {
    RewardLossSpec s;
    s.margin = margin;
    if (name == "negate")
        s.map = RewardLossMap::Negate;
    else if (name == "relu_margin")
        s.map = RewardLossMap::ReluMargin;
    else if (name == "paper_literal")
        s.map = RewardLossMap::PaperLiteral;
    else
        throw ConfigError("reward_to_loss: unknown map \"" + name +
                          "\" (expected negate|relu_margin|paper_literal)");
    return s;
}

std::string RewardLossSpec::name() const {
    switch (map) {
        case RewardLossMap::Negate: return "negate";
        case RewardLossMap::ReluMargin: return "relu_margin";
        case RewardLossMap::PaperLiteral: return "paper_literal";
    }
    return "?";
}

double reward_to_loss(const RewardScore& r, const RewardLossSpec& spec) {
    switch (spec.map) {
        case RewardLossMap::Negate: return -r.value;
        case RewardLossMap::ReluMargin: return std::max(0.0, spec.margin - r.value);
        case RewardLossMap::PaperLiteral: return std::max(0.0, r.value);
    }
    return 0.0;
}

}  // namespace realign
