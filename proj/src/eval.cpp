#include "realign/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "realign/errors.hpp"
#include "realign/io.hpp"
#include "realign/rng.hpp"

namespace realign {

PromptSet load_prompt_set(const std::string& path, const std::string& format,
                          const std::string& name) {
    PromptSet ps;
    ps.name = name;
    std::set<std::string> seen_text;
    auto add = [&](const std::string& text, const std::string& id) {
        std::string trimmed = text;
        size_t b = trimmed.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return;  // skip blank records
        if (!seen_text.insert(text).second) {
            ps.duplicates_removed += 1;
            return;
        }
        ps.prompts.push_back(Prompt::make(text, id));
    };

    if (format == "lines-txt") {
        std::ifstream is(path);
        if (!is) throw IoError("load_prompt_set: cannot open " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            add(line, "");
        }
    } else if (format == "caption-json") {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError("load_prompt_set: malformed JSON in " + path + ": " + e.what());
        }
        if (!j.is_array())
            throw ProtocolError("load_prompt_set: " + path + " must hold an array of records");
        int rec = 0;
        for (const auto& e : j) {
            ++rec;
            if (!e.is_object() || !e.contains("id") || !e.contains("caption"))
                throw ProtocolError("load_prompt_set: record " + std::to_string(rec) + " in " +
                                    path + " lacks id/caption");
            add(e["caption"].get<std::string>(), e["id"].is_string()
                                                     ? e["id"].get<std::string>()
                                                     : std::to_string(e["id"].get<int64_t>()));
        }
    } else {
        throw ConfigError("load_prompt_set: unknown format \"" + format +
                          "\" (expected lines-txt|caption-json)");
    }

    std::set<std::string> ids;
    for (const auto& p : ps.prompts)
        if (!ids.insert(p.id).second)
            throw ProtocolError("load_prompt_set: duplicate prompt id " + p.id);
    std::sort(ps.prompts.begin(), ps.prompts.end(),
              [](const Prompt& a, const Prompt& b) { return a.id < b.id; });
    return ps;
}

EvalReport evaluate(const std::vector<LatentImage>& images, const PromptSet& prompts,
                    const std::vector<const MetricClient*>& metric_clients,
                    bool record_wall_time) {
    if (images.size() != prompts.prompts.size())
        throw ConfigError("evaluate: need one image per prompt (" + std::to_string(images.size()) +
                          " images, " + std::to_string(prompts.prompts.size()) + " prompts)");
    auto t0 = std::chrono::steady_clock::now();
    EvalReport r;
    r.prompt_set_name = prompts.name;
    r.image_count = static_cast<int>(images.size());
    for (const auto& p : prompts.prompts) r.prompt_ids.push_back(p.id);

    for (const MetricClient* mc : metric_clients) {
        MetricResult res;
        res.client_id = mc->client_id();
        res.lower_is_better = mc->lower_is_better();
        try {
            std::vector<double> per;
            res.value = mc->evaluate(images, prompts.prompts, &per);
            res.available = true;
            if (!per.empty()) r.per_prompt[mc->metric_name()] = std::move(per);
        } catch (const std::exception& e) {
            res.available = false;
            res.error = e.what();
        }
        r.metrics[mc->metric_name()] = std::move(res);
    }
    if (record_wall_time)
        r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::string report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["prompt_set"] = r.prompt_set_name;
    j["image_count"] = r.image_count;
    j["config_hash"] = hex64(r.config_hash);
    j["wall_time_s"] = r.wall_time_s;
    j["prompt_ids"] = r.prompt_ids;
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, m] : r.metrics) {
        nlohmann::json mj;
        mj["available"] = m.available;
        mj["lower_is_better"] = m.lower_is_better;
        mj["client_id"] = m.client_id;
        if (m.available)
            mj["value"] = m.value;
        else
            mj["error"] = m.error;
        metrics[name] = mj;
    }
    j["metrics"] = metrics;
    nlohmann::json pp = nlohmann::json::object();
    for (const auto& [name, scores] : r.per_prompt) pp[name] = scores;
    j["per_prompt"] = pp;
    return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    EvalReport r;
    r.prompt_set_name = j.at("prompt_set").get<std::string>();
    r.image_count = j.at("image_count").get<int>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    r.prompt_ids = j.at("prompt_ids").get<std::vector<std::string>>();
    for (auto it = j.at("metrics").begin(); it != j.at("metrics").end(); ++it) {
        MetricResult m;
        m.available = it.value().at("available").get<bool>();
        m.lower_is_better = it.value().at("lower_is_better").get<bool>();
        m.client_id = it.value().at("client_id").get<std::string>();
        if (m.available) m.value = it.value().at("value").get<double>();
        else m.error = it.value().value("error", "");
        r.metrics[it.key()] = m;
    }
    for (auto it = j.at("per_prompt").begin(); it != j.at("per_prompt").end(); ++it)
        r.per_prompt[it.key()] = it.value().get<std::vector<double>>();
    return r;
}

ComparisonTable compare(const std::vector<EvalReport>& reports,
                        const std::vector<std::string>& labels) {
    if (reports.size() < 1) throw ConfigError("compare: need at least one report");
    for (size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].prompt_set_name != reports[0].prompt_set_name ||
            reports[i].prompt_ids != reports[0].prompt_ids)
            throw ConfigError("compare: reports do not share a prompt set; refusing comparison");
    }

    ComparisonTable t;
    std::set<std::string> names;
    for (const auto& r : reports)
        for (const auto& [n, m] : r.metrics) names.insert(n);
    t.metric_names.assign(names.begin(), names.end());
    for (size_t i = 0; i < reports.size(); ++i)
        t.report_labels.push_back(i < labels.size() ? labels[i]
                                                    : "report" + std::to_string(i + 1));

    t.values.assign(reports.size(),
                    std::vector<std::optional<double>>(t.metric_names.size(), std::nullopt));
    for (size_t ri = 0; ri < reports.size(); ++ri)
        for (size_t mi = 0; mi < t.metric_names.size(); ++mi) {
            auto it = reports[ri].metrics.find(t.metric_names[mi]);
            if (it != reports[ri].metrics.end() && it->second.available)
                t.values[ri][mi] = it->second.value;
        }

    t.best_row_per_metric.assign(t.metric_names.size(), -1);
    if (reports.size() >= 2) {
        for (size_t mi = 0; mi < t.metric_names.size(); ++mi) {
            bool lower = false;
            for (const auto& r : reports) {
                auto it = r.metrics.find(t.metric_names[mi]);
                if (it != r.metrics.end()) lower = it->second.lower_is_better;
            }
            int best = -1;
            for (size_t ri = 0; ri < reports.size(); ++ri) {
                if (!t.values[ri][mi]) continue;
                if (best < 0) {
                    best = static_cast<int>(ri);
                    continue;
                }
                double cur = *t.values[ri][mi], b = *t.values[static_cast<size_t>(best)][mi];
                if (lower ? (cur < b) : (cur > b)) best = static_cast<int>(ri);
            }
            t.best_row_per_metric[mi] = best;
        }
    }
    return t;
}

std::string ComparisonTable::render() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "method";
    for (const auto& m : metric_names) os << std::setw(14) << m;
    os << "\n";
    for (size_t ri = 0; ri < report_labels.size(); ++ri) {
        os << std::setw(16) << report_labels[ri];
        for (size_t mi = 0; mi < metric_names.size(); ++mi) {
            std::ostringstream cell;
            if (values[ri][mi]) {
                cell << std::fixed << std::setprecision(4) << *values[ri][mi];
                if (best_row_per_metric[mi] == static_cast<int>(ri)) cell << "*";
            } else {
                cell << "n/a";
            }
            os << std::setw(14) << cell.str();
        }
        os << "\n";
    }
    return os.str();
}

// --- stubs ---------------------------------------------------------------

namespace {
std::vector<double> pseudo_image_embedding(const LatentImage& img, int dim) {
    // project simple pixel moments through a fixed hashed matrix
    double m1 = 0.0, m2 = 0.0, m3 = 0.0;
    for (double v : img.data) {
        m1 += v;
        m2 += v * v;
        m3 += v * v * v;
    }
    double n = static_cast<double>(img.data.size());
    double feats[3] = {m1 / n, m2 / n, m3 / n};
    std::vector<double> out(static_cast<size_t>(dim), 0.0);
    for (int f = 0; f < 3; ++f) {
        Rng rng(mix_seed(static_cast<uint64_t>(f), "stub-clip-proj"));
        for (int k = 0; k < dim; ++k) out[static_cast<size_t>(k)] += feats[f] * rng.normal();
    }
    return out;
}
}  // namespace

double StubClipMetric::score_one(const LatentImage& image, const Prompt& prompt) const {
    HashedBowEncoder enc(dim_);
    auto te = enc.encode(prompt.text);
    auto ie = pseudo_image_embedding(image, dim_);
    double na = 0.0;
    for (double v : ie) na += v * v;
    if (na == 0.0) return 0.0;  // featureless image, neutral score
    return cosine_similarity(te, ie);
}

double StubClipMetric::evaluate(const std::vector<LatentImage>& images,
                                const std::vector<Prompt>& prompts,
                                std::vector<double>* per_prompt) const {
    double sum = 0.0;
    std::vector<double> per;
    per.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        double s = score_one(images[i], prompts[i]);
        per.push_back(s);
        sum += s;
    }
    if (per_prompt) *per_prompt = per;
    return images.empty() ? 0.0 : sum / static_cast<double>(images.size());
}

StubFidMetric StubFidMetric::from_stats_file(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    return StubFidMetric(j.at("mean").get<double>(), j.at("var").get<double>());
}

double StubFidMetric::evaluate(const std::vector<LatentImage>& images,
                               const std::vector<Prompt>&, std::vector<double>*) const {
    if (images.empty()) throw ClientError("stub fid: empty image set");
    double mean = 0.0;
    int64_t n = 0;
    for (const auto& img : images)
        for (double v : img.data) {
            mean += v;
            ++n;
        }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& img : images)
        for (double v : img.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    double dm = mean - ref_mean_;
    double dv = std::sqrt(var) - std::sqrt(std::max(0.0, ref_var_));
    return dm * dm + dv * dv;
}

double StubTifaMetric::evaluate(const std::vector<LatentImage>& images,
                                const std::vector<Prompt>& prompts,
                                std::vector<double>* per_prompt) const {
    double sum = 0.0;
    std::vector<double> per;
    per.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        uint64_t h = fnv1a(prompts[i].text);
        for (double v : images[i].data) {
            uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof(bits));
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(&bits), 8), h);
        }
        double s = static_cast<double>(h % 10000) / 9999.0;
        per.push_back(s);
        sum += s;
    }
    if (per_prompt) *per_prompt = per;
    return images.empty() ? 0.0 : sum / static_cast<double>(images.size());
}

double FailingMetric::evaluate(const std::vector<LatentImage>&, const std::vector<Prompt>&,
                               std::vector<double>*) const {
    throw ClientError("metric client \"" + name_ + "\" unavailable");
}

}  // namespace realign
