#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "realign/rewards.hpp"
#include "realign/tensor.hpp"

namespace realign {

enum class Verdict { Certain, Possible, Unlikely };

std::string verdict_name(Verdict v);
Verdict parse_verdict(const std::string& s);  // throws ProtocolError on anything else

// likelihood score: certain -> 2, possible -> 0.5, unlikely -> 0
double assign_score(const std::string& category, Verdict verdict);

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> grid;  // strictly 0/1, row-major

    bool empty() const { return grid.empty() || area() == 0; }
    int64_t area() const;
};

// run-length exchange format: "RLE <w> <h>" header, runs alternate 0/1 starting with zeros
std::string mask_to_rle(const Mask& m);
Mask mask_from_rle(const std::string& text);

struct ObjectAnnotation {
    std::string tag;
    std::string local_caption;
    double score = 0.0;  // one of {2, 0.5, 0}
    Mask mask;
    int object_index = 0;
};

class TaggerClient {
public:
    virtual ~TaggerClient() = default;
    virtual std::vector<std::string> tags(const LatentImage& image) const = 0;
    virtual std::string model_id() const = 0;
};

// The scorer speaks the versioned wire format; callers parse its raw reply.
class LLMScorerClient {
public:
    virtual ~LLMScorerClient() = default;
    virtual std::string complete(const std::string& request) const = 0;
    virtual std::string model_id() const = 0;
};

class SegmenterClient {
public:
    virtual ~SegmenterClient() = default;
    virtual Mask segment(const LatentImage& image, const std::string& tag) const = 0;
    virtual std::string model_id() const = 0;
};

struct ScoredTag {
    Verdict verdict;
    std::string caption;
};

// Versioned scoring-request template presented to the LLM.
inline constexpr const char* kScorerTemplateVersion = "v1";
std::string build_scorer_request(const Prompt& prompt, const std::vector<std::string>& tags);

// Strict parse of the scorer reply: a JSON object mapping every requested tag
// exactly once to {"verdict": certain|possible|unlikely, "caption": string}.
std::map<std::string, ScoredTag> parse_scorer_response(const std::string& raw,
                                                       const std::vector<std::string>& requested_tags);

std::vector<ObjectAnnotation> generate_annotations(const LatentImage& image, const Prompt& prompt,
                                                   const TaggerClient& tagger,
                                                   const LLMScorerClient& scorer,
                                                   const SegmenterClient& segmenter);

// --- deterministic stubs -------------------------------------------------

// Content words of the prompt plus a configured distractor list.
class StubTagger : public TaggerClient {
public:
    explicit StubTagger(std::vector<std::string> extra_tags = {"sign", "banana", "desk"})
        : extras_(std::move(extra_tags)) {}
    void set_prompt_context(const std::string& prompt) { prompt_ = prompt; }
    std::vector<std::string> tags(const LatentImage& image) const override;
    std::string model_id() const override { return "stub-tagger"; }

private:
    std::vector<std::string> extras_;
    std::string prompt_;
};

// Rule-based verdicts: "certain" when the tag matches a prompt token
// (case-folded, light plural stripping), "unlikely" when blocklisted,
// "possible" otherwise. Replies in the v1 wire format.
class StubLLMScorer : public LLMScorerClient {
public:
    explicit StubLLMScorer(std::set<std::string> blocklist = {"sign", "banana"})
        : blocklist_(std::move(blocklist)) {}
    std::string complete(const std::string& request) const override;
    std::string model_id() const override { return "stub-llm-scorer"; }

private:
    std::set<std::string> blocklist_;
};

// Deterministic rectangle derived from the tag hash; never empty.
class StubSegmenter : public SegmenterClient {
public:
    StubSegmenter(int height, int width) : h_(height), w_(width) {}
    Mask segment(const LatentImage& image, const std::string& tag) const override;
    std::string model_id() const override { return "stub-segmenter"; }

private:
    int h_, w_;
};

// Success-rate harness over a labeled fixture set.
struct ScorerFixture {
    std::string name;
    std::vector<std::string> tags;
    std::string raw_response;
    bool well_formed = true;
};

struct HarnessReport {
    int total = 0;
    int parsed_ok = 0;
    int protocol_errors = 0;
    int misclassified = 0;  // well-formed rejected, or malformed accepted
    double success_rate() const { return total ? static_cast<double>(parsed_ok) / total : 0.0; }
};

HarnessReport run_success_harness(const std::vector<ScorerFixture>& fixtures);
std::vector<ScorerFixture> load_scorer_fixtures(const std::string& path);

}  // namespace realign
