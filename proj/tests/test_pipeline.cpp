#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ebcl/pipeline.hpp"

using namespace ebcl::pipeline;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Config micro_config(const std::string& workdir) {
    Config c = Config::defaults();
    c.workdir = workdir;
    c.generator.n_patients = 70;
    c.generator.n_static_features = 2;
    c.generator.n_static_values = 4;
    c.generator.n_oscillating_features = 2;
    c.generator.obs_rate = 6.0;
    c.generator.span_days = 16.0;
    c.generator.events_min = 1;
    c.generator.events_max = 1;
    c.generator.trend_shift_scale = 1.0;
    c.generator.post_trend_decay_days = 1.0;
    c.generator.outcome_delay_mean_days = 30.0;
    c.generator.seed = 21;
    c.tau = 20;
    c.min_len = 8;
    c.encoder.d_token = 8;
    c.encoder.n_layers = 1;
    c.encoder.d_ff = 16;
    c.encoder.n_heads = 2;
    c.encoder.max_len = 20;
    c.encoder.d_embed = 8;
    c.pretrain.max_epochs = 2;
    c.pretrain.batch_size = 8;
    c.pretrain.learning_rate = 2e-3;
    c.finetune.max_epochs = 2;
    c.finetune.batch_size = 16;
    c.finetune_seeds = {0};
    c.cluster_k = 2;
    c.l2_grid = {1e-2};
    c.seed = 0;
    return c;
}

}  // namespace

TEST_CASE("config defaults round trip through JSON and hash deterministically") {
    Config a = Config::defaults();
    Config b = Config::from_json_text(a.to_json_text());
    CHECK(a.to_json_text() == b.to_json_text());
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);

    Config c = a;
    c.tau = 256;
    CHECK(config_hash(a) != config_hash(c));

    // documented paper defaults survive the round trip
    CHECK(b.tau == 512);
    CHECK(b.min_len == 16);
    CHECK(b.encoder.d_token == 32);
    CHECK(b.encoder.d_ff == 128);
    CHECK(b.encoder.n_layers == 2);
    CHECK(b.encoder.max_len == 512);
    CHECK(b.pretrain.max_epochs == 300);
    CHECK(b.finetune.max_epochs == 100);
    CHECK(b.search.n_trials == 16);
    CHECK(b.search.grace_period == 4);
    CHECK(b.search.reduction_factor == 2);
    CHECK(b.finetune_seeds.size() == 5);
}

TEST_CASE("micro pipeline: generate, preprocess, pretrain, probe, cluster, report") {
    const fs::path wd = fs::temp_directory_path() / "ebcl_pipe_test";
    fs::remove_all(wd);
    Config cfg = micro_config(wd.string());

    CHECK(run_stage("generate", cfg, false) == 0);
    CHECK(fs::exists(wd / "cohort.jsonl"));
    CHECK(fs::exists(wd / "outcomes.jsonl"));
    CHECK(fs::exists(wd / "ground_truth.jsonl"));
    CHECK(fs::exists(wd / "cohort.jsonl.stamp.json"));

    // refusal without --force, identical config hash
    CHECK_THROWS_WITH_AS(run_stage("generate", cfg, false), doctest::Contains("--force"), std::runtime_error);
    CHECK(run_stage("generate", cfg, true) == 0);

    CHECK(run_stage("preprocess", cfg, false) == 0);
    CHECK(fs::exists(wd / "splits.json"));
    CHECK(fs::exists(wd / "vocab.json"));

    CHECK(run_stage("pretrain", cfg, false) == 0);
    CHECK(fs::exists(wd / "checkpoints" / "ebcl_seed0" / "manifest.json"));
    CHECK(fs::exists(wd / "checkpoints" / "ebcl_seed0" / "params.bin"));

    CHECK(run_stage("probe", cfg, false) == 0);
    const fs::path probe_path = wd / "reports" / "probe_ebcl_mortality_seed0.json";
    REQUIRE(fs::exists(probe_path));
    const std::string first = slurp(probe_path);

    // identical rerun reproduces the metric JSON byte for byte
    CHECK(run_stage("probe", cfg, true) == 0);
    CHECK(slurp(probe_path) == first);

    // random-init probe works without a checkpoint
    Config random_cfg = cfg;
    random_cfg.objective = "random";
    CHECK(run_stage("probe", random_cfg, false) == 0);
    CHECK(fs::exists(wd / "reports" / "probe_random_mortality_seed0.json"));

    CHECK(run_stage("knn", cfg, false) == 0);
    CHECK(fs::exists(wd / "reports" / "knn_ebcl_mortality_seed0.json"));

    CHECK(run_stage("cluster", cfg, false) == 0);
    CHECK(fs::exists(wd / ("cluster_ebcl_seed0.json")));

    CHECK(run_stage("report", cfg, false) == 0);
    CHECK(fs::exists(wd / "report.md"));
    CHECK(fs::exists(wd / "report.csv"));
    const std::string md = slurp(wd / "report.md");
    CHECK(md.find("probe_ebcl") != std::string::npos);
    CHECK(md.find("mortality") != std::string::npos);
    CHECK(md.find("±") != std::string::npos);
}

TEST_CASE("finetune stage emits per-seed reports and predictions") {
    const fs::path wd = fs::temp_directory_path() / "ebcl_pipe_ft";
    fs::remove_all(wd);
    Config cfg = micro_config(wd.string());
    cfg.finetune_seeds = {0, 1};
    REQUIRE(run_stage("generate", cfg, false) == 0);
    REQUIRE(run_stage("preprocess", cfg, false) == 0);

    // random-init finetune (supervised baseline path)
    Config sup = cfg;
    sup.objective = "random";
    CHECK(run_stage("finetune", sup, false) == 0);
    CHECK(fs::exists(wd / "reports" / "finetune_random_mortality_seed0.json"));
    CHECK(fs::exists(wd / "reports" / "finetune_random_mortality_seed1.json"));
    CHECK(fs::exists(wd / "predictions_random_mortality_seed0.csv"));
    CHECK(fs::exists(wd / "checkpoints" / "finetune_random_mortality_seed0" / "params.bin"));

    const std::string pred = slurp(wd / "predictions_random_mortality_seed0.csv");
    CHECK(pred.rfind("score,label\n", 0) == 0);
}

TEST_CASE("report aggregation emits mean and std per method and task") {
    std::vector<ebcl::eval::EvalReport> reports;
    for (int seed = 0; seed < 5; ++seed) {
        ebcl::eval::EvalReport r;
        r.task = "mortality";
        r.method = "finetune_ebcl";
        r.auroc_point = 0.80 + 0.01 * seed;
        reports.push_back(r);
        r.method = "finetune_random";
        r.auroc_point = 0.70 + 0.01 * seed;
        reports.push_back(r);
        r.task = "los";
        r.method = "finetune_ebcl";
        r.auroc_point = 0.9;
        reports.push_back(r);
    }
    ReportTable table = aggregate_reports(reports, {"finetune_ebcl", "finetune_random"});
    REQUIRE(table.methods.size() == 2);
    REQUIRE(table.tasks.size() == 2);
    const std::string md = table.to_markdown();
    CHECK(md.find("82.00 ± 1.58") != std::string::npos);  // mean/std of 80..84
    CHECK(md.find("72.00 ± 1.58") != std::string::npos);
    CHECK(md.find("90.00 ± 0.00") != std::string::npos);
    const std::string csv = table.to_csv();
    CHECK(csv.find("method,los,mortality") == 0);
    // a method without reports for a task shows a dash
    CHECK(csv.find("\"-\"") != std::string::npos);
}

TEST_CASE("workdir lock blocks concurrent writers") {
    const fs::path wd = fs::temp_directory_path() / "ebcl_pipe_lock";
    fs::remove_all(wd);
    fs::create_directories(wd);
    {
        std::ofstream lock(wd / ".lock");
    }
    Config cfg = micro_config(wd.string());
    CHECK_THROWS_WITH_AS(run_stage("generate", cfg, false), doctest::Contains("locked"), std::runtime_error);
    fs::remove(wd / ".lock");
    CHECK(run_stage("generate", cfg, false) == 0);
}

TEST_CASE("unknown subcommands are rejected") {
    Config cfg = Config::defaults();
    CHECK_THROWS_AS(run_stage("trainify", cfg, false), std::invalid_argument);
}
