#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "realign/attnmod.hpp"
#include "realign/config.hpp"
#include "realign/dense_caption.hpp"
#include "realign/diffusion.hpp"
#include "realign/errors.hpp"
#include "realign/eval.hpp"
#include "realign/io.hpp"
#include "realign/refl.hpp"
#include "realign/rewards.hpp"

namespace fs = std::filesystem;
using namespace realign;

namespace {

// exit-code classes: 0 ok, 2 config, 3 client/protocol, 4 numeric/shape/range, 5 io
constexpr int kExitConfig = 2;
constexpr int kExitClient = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitIo = 5;

struct GlobalOpts {
    std::string out_dir = "runs/out";
    uint64_t seed = 42;
    bool stub_clients = false;
    std::string config_path;
};

RunConfig load_or_default_config(const GlobalOpts& g) {
    if (!g.config_path.empty()) return load_run_config(g.config_path);
    RunConfig c;
    c.validate();
    return c;
}

void append_run_record(const GlobalOpts& g, const std::string& command, uint64_t cfg_hash,
                       const std::vector<std::string>& prompts,
                       const std::vector<std::string>& artifacts, const nlohmann::json& rewards,
                       const std::string& annotations_digest, double wall_time_s) {
    fs::create_directories(g.out_dir);
    nlohmann::json rec;
    rec["command"] = command;
    rec["config_hash"] = hex64(cfg_hash);
    rec["seed"] = g.seed;
    rec["prompts"] = prompts;
    rec["artifacts"] = artifacts;
    rec["rewards"] = rewards;
    rec["annotations_digest"] = annotations_digest;
    rec["timings_s"] = g.stub_clients ? 0.0 : wall_time_s;
    std::ofstream os(g.out_dir + "/run_records.jsonl", std::ios::app);
    os << rec.dump() << "\n";
}

std::vector<Prompt> builtin_toy_prompts() {
    std::vector<Prompt> out;
    const char* texts[] = {
        "a red book and a yellow pen",  "a blue car on a road",
        "a green cup near a lamp",      "a small dog beside a boat",
        "a yellow lamp and a red cup",  "a tree and a blue boat",
        "a red pen on a desk",          "a green book and a black dog",
    };
    int i = 0;
    for (const char* t : texts) out.push_back(Prompt::make(t, "toy-" + std::to_string(i++)));
    return out;
}

std::vector<Prompt> load_prompts_or_builtin(const std::optional<DatasetRef>& ref) {
    if (!ref) return builtin_toy_prompts();
    return load_prompt_set(ref->path, ref->format).prompts;
}

nlohmann::json annotations_to_json(const std::vector<ObjectAnnotation>& anns) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : anns) {
        nlohmann::json e;
        e["tag"] = a.tag;
        e["score"] = a.score;
        e["local_caption"] = a.local_caption;
        e["object_index"] = a.object_index;
        e["mask_rle"] = a.mask.grid.empty() ? "" : mask_to_rle(a.mask);
        arr.push_back(e);
    }
    return arr;
}

int cmd_finetune(const GlobalOpts& g, int max_iter_override) {
    RunConfig cfg = load_or_default_config(g);
    if (max_iter_override >= 0) cfg.refl.max_iterations = max_iter_override;
    cfg.refl.record_wall_time = !g.stub_clients;
    uint64_t hash = config_hash(cfg);

    ToyBackbone backbone(cfg.backbone, cfg.backbone_init_seed);
    backbone.set_total_steps(cfg.refl.T);
    NoiseSchedule schedule = NoiseSchedule::linear(cfg.refl.T, cfg.beta_start, cfg.beta_end);

    auto dataset = load_prompts_or_builtin(cfg.dataset);
    std::vector<Prompt> validation;
    if (cfg.validation) {
        validation = load_prompts_or_builtin(cfg.validation);
    } else {
        // deterministic 80/20 split off the tail
        size_t n_val = dataset.size() / 5;
        for (size_t i = dataset.size() - n_val; i < dataset.size(); ++i)
            validation.push_back(dataset[i]);
        dataset.resize(dataset.size() - n_val);
        if (dataset.empty()) std::swap(dataset, validation);
    }

    AnalyticStubReward reward(cfg.reward_target);
    auto pretrain = synth_pretrain_pairs(backbone, 2 * cfg.refl.batch_size, g.seed);

    TrainState state;
    state.seed = g.seed;
    state.config_hash = hash;

    TrainReport report = train(dataset, cfg.refl, state, reward, backbone, schedule, pretrain,
                               validation);

    fs::create_directories(g.out_dir);
    Checkpoint ck;
    ck.config_hash = hash;
    ck.state = state;
    ck.betas = schedule.betas();
    ck.params = backbone.params();
    std::string ck_path = g.out_dir + "/checkpoint.rlck";
    save_checkpoint(ck_path, ck);

    std::ostringstream rep;
    for (const auto& rec : report.records) {
        nlohmann::json line;
        line["iteration"] = rec.iteration;
        line["t"] = rec.metrics.t;
        line["reward_mean"] = rec.metrics.reward_mean;
        line["reward_std"] = rec.metrics.reward_std;
        line["l_pre"] = rec.metrics.l_pre;
        line["l_total"] = rec.metrics.l_total;
        line["wall_time_s"] = rec.metrics.wall_time_s;
        rep << line.dump() << "\n";
    }
    for (const auto& [it, val] : report.val_curve) {
        nlohmann::json line;
        line["iteration"] = it;
        line["validation_reward"] = val;
        rep << line.dump() << "\n";
    }
    std::string rep_path = g.out_dir + "/train_report.jsonl";
    write_file(rep_path, rep.str());

    double total_wall = 0.0;
    for (const auto& rec : report.records) total_wall += rec.metrics.wall_time_s;
    append_run_record(g, "finetune", hash, {}, {ck_path, rep_path},
                      {{"best_val_reward", report.best_val_reward}}, "", total_wall);
    std::cout << "finetune: " << report.steps_run << " steps, checkpoint " << ck_path
              << (report.early_stopped ? " (early stopped)" : "") << "\n";
    return 0;
}

std::unique_ptr<ToyBackbone> make_backbone(const RunConfig& cfg, const std::string& checkpoint) {
    auto bb = std::make_unique<ToyBackbone>(cfg.backbone, cfg.backbone_init_seed);
    bb->set_total_steps(cfg.refl.T);
    if (!checkpoint.empty()) {
        Checkpoint ck = load_checkpoint(checkpoint);
        if (ck.params.size() != bb->params().size())
            throw ConfigError("checkpoint parameter count does not match backbone config");
        bb->params() = ck.params;
    }
    return bb;
}

int cmd_generate(const GlobalOpts& g, const std::string& prompt_text,
                 const std::string& checkpoint) {
    RunConfig cfg = load_or_default_config(g);
    uint64_t hash = config_hash(cfg);
    auto backbone = make_backbone(cfg, checkpoint);
    NoiseSchedule schedule = NoiseSchedule::linear(cfg.refl.T, cfg.beta_start, cfg.beta_end);
    Prompt prompt = Prompt::make(prompt_text);

    SampleResult res = sample(prompt.text, schedule, *backbone, nullptr, g.seed,
                              backbone->latent_shape());
    fs::create_directories(g.out_dir);
    std::string img_path = g.out_dir + "/image.rten";
    save_tensor(img_path, res.x0);
    export_attention_traces(g.out_dir + "/traces", "attn", res.traces);
    append_run_record(g, "generate", hash, {prompt.text}, {img_path}, nlohmann::json::object(),
                      "", 0.0);
    std::cout << "generate: wrote " << img_path << "\n";
    return 0;
}

int cmd_refine(const GlobalOpts& g, const std::string& prompt_text, const std::string& image_path,
               const std::string& checkpoint, double lambda0_override) {
    RunConfig cfg = load_or_default_config(g);
    if (lambda0_override >= 0.0) cfg.lambda0 = lambda0_override;
    uint64_t hash = config_hash(cfg);
    auto backbone = make_backbone(cfg, checkpoint);
    NoiseSchedule schedule = NoiseSchedule::linear(cfg.refl.T, cfg.beta_start, cfg.beta_end);
    Prompt prompt = Prompt::make(prompt_text);

    // coarse generation (or a supplied latent)
    LatentImage coarse;
    std::vector<AttnTrace> coarse_traces;
    if (image_path.empty()) {
        SampleResult res =
            sample(prompt.text, schedule, *backbone, nullptr, g.seed, backbone->latent_shape());
        coarse = std::move(res.x0);
        coarse_traces = std::move(res.traces);
    } else {
        coarse = load_tensor(image_path);
        SampleResult res =
            sample(prompt.text, schedule, *backbone, nullptr, g.seed, backbone->latent_shape());
        coarse_traces = std::move(res.traces);
    }

    if (!g.stub_clients)
        throw ClientError("refine: only --stub-clients mode is available in this build; "
                          "configure real tagger/scorer/segmenter clients via environment");

    StubTagger tagger;
    tagger.set_prompt_context(prompt.text);
    StubLLMScorer scorer;
    StubSegmenter segmenter(cfg.backbone.height, cfg.backbone.width);
    auto annotations = generate_annotations(coarse, prompt, tagger, scorer, segmenter);

    fs::create_directories(g.out_dir);
    std::string coarse_path = g.out_dir + "/coarse.rten";
    save_tensor(coarse_path, coarse);
    export_attention_traces(g.out_dir + "/traces_before", "attn", coarse_traces);

    nlohmann::json ann_json = annotations_to_json(annotations);
    std::string ann_path = g.out_dir + "/annotations.json";
    write_file(ann_path, ann_json.dump(2) + "\n");
    std::string ann_digest = hex64(fnv1a(ann_json.dump()));

    LatentImage refined;
    std::vector<AttnTrace> refined_traces;
    bool skipped = false;
    if (annotations.empty()) {
        std::cout << "refine: no annotations produced; refinement skipped, output equals the "
                     "coarse generation\n";
        refined = coarse;
        refined_traces = coarse_traces;
        skipped = true;
    } else {
        ModulationHook hook = make_modulation_hook(annotations, prompt.text, cfg.backbone.height,
                                                   cfg.backbone.width, cfg.modulation());
        SampleResult res = sample(prompt.text, schedule, *backbone, &hook.fn, g.seed,
                                  backbone->latent_shape());
        refined = std::move(res.x0);
        refined_traces = std::move(res.traces);
    }
    std::string refined_path = g.out_dir + "/refined.rten";
    save_tensor(refined_path, refined);
    export_attention_traces(g.out_dir + "/traces_after", "attn", refined_traces);

    append_run_record(g, "refine", hash, {prompt.text},
                      {coarse_path, refined_path, ann_path},
                      {{"refinement_skipped", skipped}}, ann_digest, 0.0);
    std::cout << "refine: wrote " << refined_path << " (" << annotations.size()
              << " annotations)\n";
    return 0;
}

int cmd_score(const GlobalOpts& g, const std::string& prompt_text, const std::string& image_path,
              const std::string& reward_name, const std::string& captioner_spec,
              const std::string& encoder_spec) {
    RunConfig cfg = load_or_default_config(g);
    uint64_t hash = config_hash(cfg);
    Prompt prompt = Prompt::make(prompt_text);

    LatentImage image;
    if (!image_path.empty()) {
        image = load_tensor(image_path);
    } else {
        auto backbone = make_backbone(cfg, "");
        NoiseSchedule schedule = NoiseSchedule::linear(cfg.refl.T, cfg.beta_start, cfg.beta_end);
        image = sample(prompt.text, schedule, *backbone, nullptr, g.seed,
                       backbone->latent_shape(), 0, false)
                    .x0;
    }

    RewardScore score;
    std::string caption_text;
    if (reward_name == "caption") {
        std::unique_ptr<CaptionerClient> captioner;
        if (captioner_spec == "echo")
            captioner = std::make_unique<EchoCaptioner>();
        else if (captioner_spec == "stats")
            captioner = std::make_unique<StatsCaptioner>();
        else if (captioner_spec.rfind("fixed:", 0) == 0) {
            struct FixedCaptioner : CaptionerClient {
                std::string text;
                Caption caption(const LatentImage&, const Prompt&) const override {
                    return {text, model_id()};
                }
                std::string model_id() const override { return "stub-captioner-fixed"; }
            };
            auto fc = std::make_unique<FixedCaptioner>();
            fc->text = captioner_spec.substr(6);
            captioner = std::move(fc);
        } else {
            throw ConfigError("score: unknown --captioner \"" + captioner_spec +
                              "\" (expected echo|stats|fixed:<text>)");
        }
        std::unique_ptr<TextEncoderClient> encoder;
        if (encoder_spec == "bow") {
            encoder = std::make_unique<HashedBowEncoder>();
        } else if (encoder_spec == "fixture") {
            auto te = std::make_unique<TableEncoder>();
            te->set("tg-fixture", {1.0, 1.0, 0.0});
            te->set("tp-fixture", {1.0, 0.0, 0.0});
            encoder = std::move(te);
        } else {
            throw ConfigError("score: unknown --encoder \"" + encoder_spec +
                              "\" (expected bow|fixture)");
        }
        score = caption_reward(prompt, image, *captioner, *encoder);
        // recover the caption from the digest-producing client directly
        caption_text = captioner->caption(image, prompt).text;
    } else {
        PixelMeanScorer scorer(0.0, 4.0, reward_name);
        score = embedding_reward(prompt, image, scorer);
    }

    std::cout << "reward=" << score.reward_name << " value=" << score.value;
    if (!caption_text.empty()) std::cout << " caption=\"" << caption_text << "\"";
    std::cout << "\n";
    append_run_record(g, "score", hash, {prompt.text}, {},
                      {{score.reward_name, score.value}}, "", 0.0);
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& images_dir, const std::string& prompts_path,
             const std::string& format, const std::string& metrics_spec,
             const std::string& pairing_path, const std::string& fid_ref,
             const std::string& out_path) {
    RunConfig cfg = load_or_default_config(g);
    uint64_t hash = config_hash(cfg);
    PromptSet ps = load_prompt_set(prompts_path, format);

    std::map<std::string, std::string> pairing;
    if (!pairing_path.empty()) {
        nlohmann::json j = nlohmann::json::parse(read_file(pairing_path));
        for (auto it = j.begin(); it != j.end(); ++it)
            pairing[it.key()] = it.value().get<std::string>();
    }

    std::vector<LatentImage> images;
    for (const auto& p : ps.prompts) {
        std::string path;
        if (auto it = pairing.find(p.id); it != pairing.end())
            path = it->second;
        else
            path = images_dir + "/" + p.id + ".rten";
        if (!fs::exists(path))
            throw IoError("eval: no image paired with prompt id " + p.id + " (looked for " +
                          path + ")");
        images.push_back(load_tensor(path));
    }

    std::vector<std::unique_ptr<MetricClient>> owned;
    std::vector<const MetricClient*> clients;
    if (metrics_spec != "none") {
        std::istringstream ms(metrics_spec);
        std::string tok;
        while (std::getline(ms, tok, ',')) {
            if (tok == "clip")
                owned.push_back(std::make_unique<StubClipMetric>());
            else if (tok == "fid") {
                if (!fid_ref.empty())
                    owned.push_back(
                        std::make_unique<StubFidMetric>(StubFidMetric::from_stats_file(fid_ref)));
                else
                    owned.push_back(std::make_unique<StubFidMetric>(0.0, 1.0));
            } else if (tok == "tifa")
                owned.push_back(std::make_unique<StubTifaMetric>());
            else
                throw ConfigError("eval: unknown metric \"" + tok +
                                  "\" (expected clip|fid|tifa|none)");
        }
        for (const auto& c : owned) clients.push_back(c.get());
    }

    EvalReport report = evaluate(images, ps, clients, /*record_wall_time=*/!g.stub_clients);
    report.config_hash = hash;
    fs::create_directories(g.out_dir);
    std::string out = out_path.empty() ? g.out_dir + "/eval_report.json" : out_path;
    write_file(out, report_to_json(report));

    std::cout << "eval: " << report.image_count << " images";
    for (const auto& [name, m] : report.metrics)
        if (m.available) std::cout << ", " << name << "=" << m.value;
    std::cout << " -> " << out << "\n";
    append_run_record(g, "eval", hash, {}, {out}, nlohmann::json::object(), "",
                      report.wall_time_s);
    return 0;
}

int cmd_compare(const std::vector<std::string>& report_paths) {
    std::vector<EvalReport> reports;
    std::vector<std::string> labels;
    for (const auto& p : report_paths) {
        reports.push_back(report_from_json(read_file(p)));
        labels.push_back(fs::path(p).stem().string());
    }
    ComparisonTable t = compare(reports, labels);
    std::cout << t.render();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"coarse-to-fine semantic re-alignment for toy diffusion models"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--out-dir", g.out_dir, "output directory for artifacts and run records");
    app.add_option("--seed", g.seed, "RNG seed");
    app.add_flag("--stub-clients", g.stub_clients,
                 "swap every external client for its deterministic stub");
    app.add_option("--config", g.config_path, "run configuration file (JSON)");

    auto* finetune = app.add_subcommand("finetune", "reward-feedback fine-tuning");
    int max_iter_override = -1;
    finetune->add_option("--max-iterations", max_iter_override, "override config max_iterations");

    auto* generate = app.add_subcommand("generate", "sample an image for a prompt");
    std::string gen_prompt, gen_checkpoint;
    generate->add_option("--prompt", gen_prompt, "text prompt")->required();
    generate->add_option("--checkpoint", gen_checkpoint, "checkpoint to load");

    auto* refine = app.add_subcommand("refine", "training-free fine semantic re-alignment");
    std::string ref_prompt, ref_image, ref_checkpoint;
    double lambda0_override = -1.0;
    refine->add_option("--prompt", ref_prompt, "text prompt")->required();
    refine->add_option("--image", ref_image, "coarse latent (.rten); sampled when omitted");
    refine->add_option("--checkpoint", ref_checkpoint, "checkpoint to load");
    refine->add_option("--lambda0", lambda0_override, "modulation strength override");

    auto* score = app.add_subcommand("score", "compute a reward for (image, prompt)");
    std::string sc_prompt, sc_image, sc_reward = "caption", sc_captioner = "echo",
                sc_encoder = "bow";
    score->add_option("--prompt", sc_prompt, "text prompt")->required();
    score->add_option("--image", sc_image, "latent tensor (.rten); sampled when omitted");
    score->add_option("--reward", sc_reward, "reward function")
        ->check(CLI::IsMember({"caption", "clip", "blip", "imagereward"}));
    score->add_option("--captioner", sc_captioner, "captioner stub: echo|stats|fixed:<text>");
    score->add_option("--encoder", sc_encoder, "text encoder stub: bow|fixture");

    auto* eval = app.add_subcommand("eval", "run the metric harness over generated images");
    std::string ev_images, ev_prompts, ev_format = "lines-txt", ev_metrics = "clip,fid,tifa",
                ev_pairing, ev_fid_ref, ev_out;
    eval->add_option("--images", ev_images, "directory of <prompt-id>.rten files")->required();
    eval->add_option("--prompt-set", ev_prompts, "prompt set file")->required();
    eval->add_option("--format", ev_format, "prompt set format: lines-txt|caption-json");
    eval->add_option("--metrics", ev_metrics, "comma list of clip,fid,tifa or `none`");
    eval->add_option("--pairing", ev_pairing, "pairing manifest (JSON id->path)");
    eval->add_option("--fid-ref", ev_fid_ref, "reference statistics file for fid");
    eval->add_option("--report", ev_out, "report output path");

    auto* comparec = app.add_subcommand("compare", "tabulate eval reports");
    std::vector<std::string> cmp_paths;
    comparec->add_option("reports", cmp_paths, "eval report files")->expected(-2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*finetune) return cmd_finetune(g, max_iter_override);
        if (*generate) return cmd_generate(g, gen_prompt, gen_checkpoint);
        if (*refine) return cmd_refine(g, ref_prompt, ref_image, ref_checkpoint, lambda0_override);
        if (*score) return cmd_score(g, sc_prompt, sc_image, sc_reward, sc_captioner, sc_encoder);
        if (*eval)
            return cmd_eval(g, ev_images, ev_prompts, ev_format, ev_metrics, ev_pairing,
                            ev_fid_ref, ev_out);
        if (*comparec) return cmd_compare(cmp_paths);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ClientError& e) {
        std::cerr << "client error: " << e.what() << "\n";
        return kExitClient;
    } catch (const ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return kExitClient;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const RangeError& e) {
        std::cerr << "range error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
