#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "realign/eval.hpp"
#include "realign/io.hpp"
#include "realign/rng.hpp"

using namespace realign;
namespace fs = std::filesystem;

namespace {
struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("realign-test-" + std::to_string(::getpid()) + "-" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};
}  // namespace

TEST_CASE("prompt set from lines: dedup, blank skip, sorted ids") {
    TempDir td;
    write_file(td.file("p.txt"), "a red cup\n\n  \na blue book\na red cup\nzebra crossing\n");
    PromptSet ps = load_prompt_set(td.file("p.txt"), "lines-txt", "custom");
    CHECK(ps.name == "custom");
    CHECK(ps.prompts.size() == 3);
    CHECK(ps.duplicates_removed == 1);
    for (size_t i = 1; i < ps.prompts.size(); ++i)
        CHECK(ps.prompts[i - 1].id < ps.prompts[i].id);
}

TEST_CASE("prompt set from caption json") {
    TempDir td;
    write_file(td.file("c.json"),
               R"([{"id":"b","caption":"a blue book"},{"id":"a","caption":"a red cup"}])");
    PromptSet ps = load_prompt_set(td.file("c.json"), "caption-json");
    REQUIRE(ps.prompts.size() == 2);
    CHECK(ps.prompts[0].id == "a");
    CHECK(ps.prompts[0].text == "a red cup");
    CHECK(ps.prompts[1].id == "b");

    write_file(td.file("dup.json"),
               R"([{"id":"a","caption":"one"},{"id":"a","caption":"two"}])");
    CHECK_THROWS_AS(load_prompt_set(td.file("dup.json"), "caption-json"), ProtocolError);
    write_file(td.file("bad.json"), "{not json");
    CHECK_THROWS_AS(load_prompt_set(td.file("bad.json"), "caption-json"), ProtocolError);
    write_file(td.file("rec.json"), R"([{"caption":"missing id"}])");
    CHECK_THROWS_AS(load_prompt_set(td.file("rec.json"), "caption-json"), ProtocolError);
    CHECK_THROWS_AS(load_prompt_set(td.file("p.txt"), "parquet"), ConfigError);
    CHECK_THROWS_AS(load_prompt_set(td.file("missing.txt"), "lines-txt"), IoError);
}

namespace {
PromptSet two_prompts() {
    PromptSet ps;
    ps.name = "custom";
    ps.prompts = {Prompt::make("a red cup", "p1"), Prompt::make("a blue book", "p2")};
    return ps;
}

std::vector<LatentImage> two_images(double a = 0.2, double b = -0.4) {
    return {LatentImage({1, 2, 2}, a), LatentImage({1, 2, 2}, b)};
}
}  // namespace

TEST_CASE("evaluate: pairing check and partial reports") {
    PromptSet ps = two_prompts();
    CHECK_THROWS_AS(evaluate({LatentImage({1, 2, 2}, 0.0)}, ps, {}), ConfigError);

    StubClipMetric clip;
    FailingMetric down("fid");
    EvalReport r = evaluate(two_images(), ps, {&clip, &down});
    CHECK(r.image_count == 2);
    CHECK(r.prompt_ids == std::vector<std::string>{"p1", "p2"});
    REQUIRE(r.metrics.count("clip_score"));
    CHECK(r.metrics.at("clip_score").available);
    CHECK(r.per_prompt.at("clip_score").size() == 2);
    REQUIRE(r.metrics.count("fid"));
    CHECK(!r.metrics.at("fid").available);
    CHECK(r.metrics.at("fid").error.find("unavailable") != std::string::npos);
}

TEST_CASE("stub clip metric is deterministic and bounded") {
    StubClipMetric clip;
    LatentImage img({1, 3, 3}, 0.0);
    Rng rng(6);
    for (double& v : img.data) v = rng.normal();
    Prompt p = Prompt::make("a red cup");
    double s1 = clip.score_one(img, p);
    double s2 = clip.score_one(img, p);
    CHECK(s1 == s2);
    CHECK(s1 >= -1.0);
    CHECK(s1 <= 1.0);
    // featureless image scores neutral rather than erroring
    CHECK(clip.score_one(LatentImage({1, 2, 2}, 0.0), p) == 0.0);
}

TEST_CASE("stub fid metric: zero at matching statistics, lower is better") {
    auto imgs = two_images(0.5, 0.5);
    // reference equal to the set's own statistics -> distance zero
    StubFidMetric exact(0.5, 0.0);
    CHECK(exact.lower_is_better());
    CHECK(exact.evaluate(imgs, {}, nullptr) == doctest::Approx(0.0));
    StubFidMetric off(0.0, 0.0);
    CHECK(off.evaluate(imgs, {}, nullptr) == doctest::Approx(0.25));
    CHECK_THROWS_AS(exact.evaluate({}, {}, nullptr), ClientError);
}

TEST_CASE("eval report json round-trip") {
    PromptSet ps = two_prompts();
    StubClipMetric clip;
    StubTifaMetric tifa;
    FailingMetric down("fid");
    EvalReport r = evaluate(two_images(), ps, {&clip, &tifa, &down}, false);
    r.config_hash = 0xdeadbeefULL;

    EvalReport rt = report_from_json(report_to_json(r));
    CHECK(rt.prompt_set_name == r.prompt_set_name);
    CHECK(rt.image_count == r.image_count);
    CHECK(rt.config_hash == r.config_hash);
    CHECK(rt.prompt_ids == r.prompt_ids);
    REQUIRE(rt.metrics.size() == r.metrics.size());
    for (const auto& [name, m] : r.metrics) {
        const auto& o = rt.metrics.at(name);
        CHECK(o.available == m.available);
        CHECK(o.lower_is_better == m.lower_is_better);
        CHECK(o.client_id == m.client_id);
        if (m.available) CHECK(o.value == m.value);
        else CHECK(o.error == m.error);
    }
    CHECK(rt.per_prompt == r.per_prompt);
}

TEST_CASE("compare: best marking and refusal of mismatched sets") {
    PromptSet ps = two_prompts();
    ConstantMetric clip_a("clip_score", 0.3), clip_b("clip_score", 0.6);
    ConstantMetric fid_a("fid", 10.0, true), fid_b("fid", 20.0, true);
    EvalReport ra = evaluate(two_images(), ps, {&clip_a, &fid_a}, false);
    EvalReport rb = evaluate(two_images(), ps, {&clip_b, &fid_b}, false);

    ComparisonTable t = compare({ra, rb}, {"base", "tuned"});
    REQUIRE(t.metric_names.size() == 2);
    // clip_score higher is better -> report b; fid lower is better -> report a
    size_t clip_i = t.metric_names[0] == "clip_score" ? 0 : 1;
    size_t fid_i = 1 - clip_i;
    CHECK(t.best_row_per_metric[clip_i] == 1);
    CHECK(t.best_row_per_metric[fid_i] == 0);
    CHECK(t.report_labels == std::vector<std::string>{"base", "tuned"});

    std::string rendered = t.render();
    CHECK(rendered.find("base") != std::string::npos);
    CHECK(rendered.find("0.6000*") != std::string::npos);
    CHECK(rendered.find("10.0000*") != std::string::npos);

    // single report: no best marking
    ComparisonTable solo = compare({ra});
    for (int b : solo.best_row_per_metric) CHECK(b == -1);

    // unavailable metric renders as n/a
    FailingMetric down("fid");
    EvalReport rc = evaluate(two_images(), ps, {&clip_a, &down}, false);
    ComparisonTable t2 = compare({rc, rb});
    CHECK(t2.render().find("n/a") != std::string::npos);

    PromptSet other = two_prompts();
    other.prompts[0].id = "zz";
    EvalReport rd = evaluate(two_images(), other, {&clip_a}, false);
    CHECK_THROWS_AS(compare({ra, rd}), ConfigError);
    CHECK_THROWS_AS(compare({}), ConfigError);
}

TEST_CASE("tensor file round-trip") {
    TempDir td;
    Tensor t({2, 3, 4});
    Rng rng(9);
    for (double& v : t.data) v = rng.normal();
    save_tensor(td.file("t.rten"), t);
    Tensor r = load_tensor(td.file("t.rten"));
    CHECK(r.shape == t.shape);
    CHECK(r.data == t.data);

    CHECK_THROWS_AS(load_tensor(td.file("missing.rten")), IoError);
    write_file(td.file("garbage.rten"), "NOPE garbage");
    CHECK_THROWS_AS(load_tensor(td.file("garbage.rten")), IoError);
    // truncate a valid file
    std::string full = read_file(td.file("t.rten"));
    write_file(td.file("trunc.rten"), full.substr(0, full.size() / 2));
    CHECK_THROWS_AS(load_tensor(td.file("trunc.rten")), IoError);
}

TEST_CASE("checkpoint save-load-save is byte identical") {
    TempDir td;
    Checkpoint ck;
    ck.config_hash = 0x1234abcdULL;
    ck.state.seed = 7;
    ck.state.iteration = 42;
    ck.state.best_val_reward = -0.125;
    Rng rng(4);
    ck.betas.resize(10);
    for (double& v : ck.betas) v = 0.01 * rng.uniform();
    ck.params.resize(100);
    for (double& v : ck.params) v = rng.normal();
    ck.state.velocity.assign(100, 0.0);
    for (double& v : ck.state.velocity) v = rng.normal();

    save_checkpoint(td.file("a.rlck"), ck);
    Checkpoint loaded = load_checkpoint(td.file("a.rlck"));
    CHECK(loaded.config_hash == ck.config_hash);
    CHECK(loaded.state.seed == ck.state.seed);
    CHECK(loaded.state.iteration == ck.state.iteration);
    CHECK(loaded.state.best_val_reward == ck.state.best_val_reward);
    CHECK(loaded.betas == ck.betas);
    CHECK(loaded.params == ck.params);
    CHECK(loaded.state.velocity == ck.state.velocity);

    save_checkpoint(td.file("b.rlck"), loaded);
    CHECK(read_file(td.file("a.rlck")) == read_file(td.file("b.rlck")));

    CHECK_THROWS_AS(load_checkpoint(td.file("missing.rlck")), IoError);
    write_file(td.file("bad.rlck"), "RTENnot a checkpoint");
    CHECK_THROWS_AS(load_checkpoint(td.file("bad.rlck")), IoError);
}

TEST_CASE("attention trace export writes tensors plus manifest") {
    TempDir td;
    AttnTrace tr;
    tr.step_t = 5;
    tr.n_q = 4;
    tr.n_k = 2;
    tr.attn = {0.5, 0.5, 0.25, 0.75, 1.0, 0.0, 0.6, 0.4};
    export_attention_traces(td.file("traces"), "run", {tr});
    Tensor t = load_tensor(td.file("traces") + "/run_step5.rten");
    CHECK(t.shape == std::vector<int64_t>{4, 2});
    CHECK(t.data == tr.attn);
    std::string manifest = read_file(td.file("traces") + "/run_manifest.json");
    CHECK(manifest.find("cross_attention_0") != std::string::npos);
    CHECK(manifest.find("run_step5.rten") != std::string::npos);
}
