#include "realign/dense_caption.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "realign/backbone.hpp"
#include "realign/errors.hpp"
#include "realign/io.hpp"
#include "realign/rng.hpp"

namespace realign {

std::string verdict_name(Verdict v) {
    switch (v) {
        case Verdict::Certain: return "certain";
        case Verdict::Possible: return "possible";
        case Verdict::Unlikely: return "unlikely";
    }
    return "?";
}

Verdict parse_verdict(const std::string& s) {
    if (s == "certain") return Verdict::Certain;
    if (s == "possible") return Verdict::Possible;
    if (s == "unlikely") return Verdict::Unlikely;
    throw ProtocolError("illegal verdict \"" + s + "\" (expected certain|possible|unlikely)");
}

double assign_score(const std::string&, Verdict verdict) {
    switch (verdict) {
        case Verdict::Certain: return 2.0;
        case Verdict::Possible: return 0.5;
        case Verdict::Unlikely: return 0.0;
    }
    throw ProtocolError("assign_score: unreachable verdict");
}

int64_t Mask::area() const {
    int64_t n = 0;
    for (uint8_t v : grid) n += v;
    return n;
}

std::string mask_to_rle(const Mask& m) {
    std::ostringstream os;
    os << "RLE " << m.width << " " << m.height << "\n";
    int64_t run = 0;
    uint8_t cur = 0;  // runs start with zeros
    for (uint8_t v : m.grid) {
        if (v == cur) {
            ++run;
        } else {
            os << run << " ";
            run = 1;
            cur = v;
        }
    }
    os << run << "\n";
    return os.str();
}

Mask mask_from_rle(const std::string& text) {
    std::istringstream is(text);
    std::string magic;
    Mask m;
    is >> magic >> m.width >> m.height;
    if (!is || magic != "RLE") throw ProtocolError("mask RLE: bad header");
    if (m.width < 0 || m.height < 0) throw ProtocolError("mask RLE: negative dimensions");
    m.grid.reserve(static_cast<size_t>(m.width) * static_cast<size_t>(m.height));
    int64_t run;
    uint8_t cur = 0;
    while (is >> run) {
        if (run < 0) throw ProtocolError("mask RLE: negative run length");
        m.grid.insert(m.grid.end(), static_cast<size_t>(run), cur);
        cur = 1 - cur;
    }
    if (m.grid.size() != static_cast<size_t>(m.width) * static_cast<size_t>(m.height))
        throw ProtocolError("mask RLE: run lengths do not cover width*height");
    return m;
}

std::string build_scorer_request(const Prompt& prompt, const std::vector<std::string>& tags) {
    std::ostringstream os;
    os << "realign scorer request " << kScorerTemplateVersion << "\n";
    os << "prompt: " << prompt.text << "\n";
    os << "tags: ";
    for (size_t i = 0; i < tags.size(); ++i) os << (i ? ", " : "") << tags[i];
    os << "\n";
    os << "For each tag, state how likely the object appears in a scene described by the "
          "prompt. Reply with a single JSON object mapping each tag to "
          "{\"verdict\": \"certain\"|\"possible\"|\"unlikely\", \"caption\": \"<one-line local "
          "description>\"}. Cover every tag exactly once; no extra keys.\n";
    return os.str();
}

std::map<std::string, ScoredTag> parse_scorer_response(const std::string& raw,
                                                       const std::vector<std::string>& requested_tags) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("scorer response is not valid JSON: ") + e.what() +
                            "; raw payload: " + raw);
    }
    if (!j.is_object()) throw ProtocolError("scorer response must be a JSON object; raw payload: " + raw);

    std::map<std::string, ScoredTag> out;
    std::set<std::string> requested(requested_tags.begin(), requested_tags.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& tag = it.key();
        if (!requested.count(tag))
            throw ProtocolError("scorer response contains unrequested tag \"" + tag + "\"");
        if (out.count(tag)) throw ProtocolError("scorer response duplicates tag \"" + tag + "\"");
        const auto& entry = it.value();
        if (!entry.is_object() || !entry.contains("verdict") || !entry.contains("caption") ||
            entry.size() != 2)
            throw ProtocolError("scorer entry for tag \"" + tag +
                                "\" must be exactly {verdict, caption}");
        if (!entry["verdict"].is_string() || !entry["caption"].is_string())
            throw ProtocolError("scorer entry for tag \"" + tag + "\" has non-string fields");
        ScoredTag st;
        st.verdict = parse_verdict(entry["verdict"].get<std::string>());
        st.caption = entry["caption"].get<std::string>();
        out.emplace(tag, std::move(st));
    }
    for (const auto& tag : requested)
        if (!out.count(tag)) throw ProtocolError("scorer response is missing tag \"" + tag + "\"");
    return out;
}

std::vector<ObjectAnnotation> generate_annotations(const LatentImage& image, const Prompt& prompt,
                                                   const TaggerClient& tagger,
                                                   const LLMScorerClient& scorer,
                                                   const SegmenterClient& segmenter) {
    std::vector<std::string> tags = tagger.tags(image);
    // deduplicate, keep first occurrence order for the request
    std::vector<std::string> uniq;
    std::set<std::string> seen;
    for (auto& t : tags)
        if (seen.insert(t).second) uniq.push_back(t);
    if (uniq.empty()) return {};

    std::string reply = scorer.complete(build_scorer_request(prompt, uniq));
    auto scored = parse_scorer_response(reply, uniq);

    std::vector<ObjectAnnotation> anns;
    anns.reserve(uniq.size());
    for (const auto& tag : uniq) {
        const ScoredTag& st = scored.at(tag);
        ObjectAnnotation a;
        a.tag = tag;
        a.score = assign_score(tag, st.verdict);
        a.local_caption = st.caption;
        if (a.score > 0.0 && a.local_caption.empty())
            throw ProtocolError("scorer gave empty caption for tag \"" + tag +
                                "\" with positive score");
        if (a.score > 0.0) {
            a.mask = segmenter.segment(image, tag);
            for (uint8_t v : a.mask.grid)
                if (v > 1)
                    throw ProtocolError("segmenter returned non-binary mask for tag \"" + tag + "\"");
            // empty mask for a certain object: annotation kept, mask empty
        }
        anns.push_back(std::move(a));
    }
    std::sort(anns.begin(), anns.end(), [](const ObjectAnnotation& a, const ObjectAnnotation& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.tag < b.tag;
    });
    for (size_t i = 0; i < anns.size(); ++i) anns[i].object_index = static_cast<int>(i);
    return anns;
}

// --- stubs ---------------------------------------------------------------

namespace {
const std::set<std::string>& stop_words() {
    static const std::set<std::string> sw = {"a", "an", "the", "and", "or", "of",
                                             "on", "in", "with", "to", "at"};
    return sw;
}

bool lemma_light_match(const std::string& tag, const std::vector<std::string>& prompt_tokens) {
    auto strip_s = [](const std::string& w) {
        return (w.size() > 2 && w.back() == 's') ? w.substr(0, w.size() - 1) : w;
    };
    std::string tl = strip_s(tag);
    for (const auto& tok : prompt_tokens)
        if (tok == tag || strip_s(tok) == tl) return true;
    return false;
}
}  // namespace

std::vector<std::string> StubTagger::tags(const LatentImage&) const {
    // noun-ish content words of the prompt; the scorer decides likelihoods
    static const std::set<std::string> attributes = {
        "red",  "yellow", "blue",  "green", "pink",  "purple", "black",
        "white", "brown",  "orange", "big",  "small", "tall",  "little"};
    std::vector<std::string> out;
    for (const auto& tok : tokenize(prompt_))
        if (!stop_words().count(tok) && !attributes.count(tok)) out.push_back(tok);
    for (const auto& e : extras_) out.push_back(e);
    return out;
}

std::string StubLLMScorer::complete(const std::string& request) const {
    std::istringstream is(request);
    std::string line, prompt_text, tags_line;
    while (std::getline(is, line)) {
        if (line.rfind("prompt: ", 0) == 0) prompt_text = line.substr(8);
        if (line.rfind("tags: ", 0) == 0) tags_line = line.substr(6);
    }
    if (prompt_text.empty() || tags_line.empty())
        throw ClientError("StubLLMScorer: malformed request");

    std::vector<std::string> tags;
    std::istringstream ts(tags_line);
    std::string tag;
    while (std::getline(ts, tag, ',')) {
        size_t b = tag.find_first_not_of(' ');
        size_t e = tag.find_last_not_of(' ');
        if (b != std::string::npos) tags.push_back(tag.substr(b, e - b + 1));
    }

    auto prompt_tokens = tokenize(prompt_text);
    nlohmann::json reply = nlohmann::json::object();
    for (const auto& t : tags) {
        Verdict v;
        if (lemma_light_match(t, prompt_tokens))
            v = Verdict::Certain;
        else if (blocklist_.count(t))
            v = Verdict::Unlikely;
        else
            v = Verdict::Possible;

        std::string caption;
        if (v == Verdict::Certain) {
            // pull the attribute word preceding the tag in the prompt, if any
            for (size_t i = 0; i < prompt_tokens.size(); ++i) {
                if (prompt_tokens[i] == t && i > 0 && !stop_words().count(prompt_tokens[i - 1])) {
                    caption = "a " + prompt_tokens[i - 1] + " " + t;
                    break;
                }
            }
            if (caption.empty()) caption = "a " + t;
        } else if (v == Verdict::Possible) {
            caption = "a " + t;
        }
        reply[t] = {{"verdict", verdict_name(v)}, {"caption", caption}};
    }
    return reply.dump();
}

Mask StubSegmenter::segment(const LatentImage&, const std::string& tag) const {
    Mask m;
    m.height = h_;
    m.width = w_;
    m.grid.assign(static_cast<size_t>(h_) * static_cast<size_t>(w_), 0);
    uint64_t h = fnv1a(tag);
    int bw = 1 + static_cast<int>(h % static_cast<uint64_t>(std::max(1, w_ / 2)));
    int bh = 1 + static_cast<int>((h >> 8) % static_cast<uint64_t>(std::max(1, h_ / 2)));
    int x0 = static_cast<int>((h >> 16) % static_cast<uint64_t>(std::max(1, w_ - bw)));
    int y0 = static_cast<int>((h >> 24) % static_cast<uint64_t>(std::max(1, h_ - bh)));
    for (int y = y0; y < y0 + bh; ++y)
        for (int x = x0; x < x0 + bw; ++x)
            m.grid[static_cast<size_t>(y * w_ + x)] = 1;
    return m;
}

HarnessReport run_success_harness(const std::vector<ScorerFixture>& fixtures) {
    HarnessReport r;
    for (const auto& f : fixtures) {
        r.total += 1;
        bool ok;
        try {
            parse_scorer_response(f.raw_response, f.tags);
            ok = true;
        } catch (const ProtocolError&) {
            ok = false;
            r.protocol_errors += 1;
        }
        if (ok) r.parsed_ok += 1;
        if (ok != f.well_formed) r.misclassified += 1;
    }
    return r;
}

std::vector<ScorerFixture> load_scorer_fixtures(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    std::vector<ScorerFixture> out;
    for (const auto& e : j) {
        ScorerFixture f;
        f.name = e.at("name").get<std::string>();
        f.tags = e.at("tags").get<std::vector<std::string>>();
        f.raw_response = e.at("response").is_string() ? e.at("response").get<std::string>()
                                                      : e.at("response").dump();
        f.well_formed = e.at("well_formed").get<bool>();
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace realign
