#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ebcl/training.hpp"
#include "support.hpp"

using namespace ebcl::training;
using ebcl::events::Dataset;
using ebcl::events::InputMode;
using ebcl::feat::TokenRow;
using ebcl::feat::Vocabulary;
using ebcl::model::EncoderConfig;
using ebcl::model::ParamStore;
using ebcl::nn::Matrix;
using ebcl::objectives::EncodedPair;
using ebcl::objectives::Objective;
using ebcl::objectives::PairDataset;

namespace {

namespace fs = std::filesystem;

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.d_token = 8;
    cfg.n_layers = 1;
    cfg.d_ff = 16;
    cfg.n_heads = 2;
    cfg.max_len = 24;
    cfg.d_embed = 8;
    return cfg;
}

TokenRow row_with_values(int max_len, int n_valid, double value_shift, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.3);
    TokenRow row;
    row.times.assign(static_cast<size_t>(max_len), 0.0);
    row.feature_ids.assign(static_cast<size_t>(max_len), 0);
    row.cont_values.assign(static_cast<size_t>(max_len), 0.0);
    row.cat_value_ids.assign(static_cast<size_t>(max_len), 0);
    row.is_cont.assign(static_cast<size_t>(max_len), 0);
    row.mask.assign(static_cast<size_t>(max_len), 0);
    row.n_valid = n_valid;
    for (int i = 0; i < n_valid; ++i) {
        const size_t s = static_cast<size_t>(i);
        row.times[s] = -1.0 + 0.1 * i;
        row.is_cont[s] = 1;
        row.cont_values[s] = value_shift + noise(rng);
        row.mask[s] = 1;
    }
    return row;
}

// Labeled pairs whose pre windows carry the label in their mean value.
PairDataset separable_pairs(int n, uint64_t seed) {
    PairDataset out;
    for (int i = 0; i < n; ++i) {
        EncodedPair p;
        p.patient_id = "p" + std::to_string(i);
        p.label = i % 2;
        const double shift = p.label ? 2.0 : -2.0;
        p.pre = row_with_values(16, 10, shift, seed + static_cast<uint64_t>(i));
        p.post = row_with_values(16, 10, shift, seed + 1000 + static_cast<uint64_t>(i));
        out.push_back(std::move(p));
    }
    return out;
}

// Scripted-validation trainer for the early-stopping walk; the "parameters"
// record the epoch that produced them.
class ScriptedTrainer : public ObjectiveTrainer {
public:
    explicit ScriptedTrainer(std::vector<double> vals) : vals_(std::move(vals)) {}
    ParamStore init_params(uint64_t) const override {
        ParamStore p;
        p.add("epoch", Matrix::Zero(1, 1));
        return p;
    }
    double train_epoch(ParamStore& params, Adam&, double, std::mt19937_64&) override {
        params.at("epoch")(0, 0) = static_cast<double>(++epoch_);
        return 1.0;
    }
    double validation_loss(const ParamStore&) const override {
        return vals_.at(static_cast<size_t>(epoch_ - 1));
    }

private:
    std::vector<double> vals_;
    int epoch_ = 0;
};

struct MockTrialRunner : TrialRunner {
    // val loss = base[id] / epoch, except diverging trials
    std::vector<double> base;
    std::set<int> diverging;
    std::map<int, std::vector<int>> epochs_seen;
    void ensure_trial(int id, double, double) override {
        if (static_cast<size_t>(id) >= base.size()) base.resize(static_cast<size_t>(id) + 1, 1.0);
    }
    double run_to_epoch(int id, int epoch) override {
        epochs_seen[id].push_back(epoch);
        if (diverging.count(id)) return std::numeric_limits<double>::quiet_NaN();
        return base[static_cast<size_t>(id)] / static_cast<double>(epoch);
    }
};

}  // namespace

TEST_CASE("early stopping keeps the best epoch and stops after the tolerance") {
    // losses 1.0, 0.9, 0.92, 0.93, 0.95 with tolerance 3: stop after epoch 5, keep epoch 2
    ScriptedTrainer trainer({1.0, 0.9, 0.92, 0.93, 0.95, 0.4, 0.3});
    RunConfig run;
    run.max_epochs = 7;
    run.early_stop_tolerance = 3;
    TrainResult result = pretrain(run, trainer);
    CHECK(result.provenance.val_trace.size() == 5);
    CHECK(result.provenance.best_epoch == 2);
    CHECK(result.provenance.best_val == doctest::Approx(0.9));
    CHECK(result.params.at("epoch")(0, 0) == 2.0);

    // best-epoch selection equals the argmin of the recorded trace
    const auto& trace = result.provenance.val_trace;
    const auto argmin = std::min_element(trace.begin(), trace.end()) - trace.begin();
    CHECK(result.provenance.best_epoch == argmin + 1);
}

TEST_CASE("max_epochs of one runs exactly one epoch") {
    ScriptedTrainer trainer({0.5, 0.4});
    RunConfig run;
    run.max_epochs = 1;
    TrainResult result = pretrain(run, trainer);
    CHECK(result.provenance.val_trace.size() == 1);
    CHECK(result.provenance.best_epoch == 1);
}

TEST_CASE("divergence aborts with a diagnostic") {
    ScriptedTrainer trainer({std::numeric_limits<double>::quiet_NaN()});
    RunConfig run;
    CHECK_THROWS_WITH_AS(pretrain(run, trainer), doctest::Contains("diverged"), std::runtime_error);
}

TEST_CASE("one adam step on a single example decreases its loss") {
    EncoderConfig cfg = tiny_config();
    Dataset ds = testsupport::tiny_dataset(2, 40, 1);
    Vocabulary vocab = testsupport::tiny_vocab(ds);
    ParamStore params = ebcl::model::init_encoder_params(cfg, vocab.n_features(), vocab.n_cat_ids, 3);
    std::mt19937_64 head_rng(4);
    params.add("ocp_w", ebcl::model::truncated_normal(cfg.d_embed, 1, 0.02, head_rng));
    params.add("ocp_b", Matrix::Zero(1, 1));

    ebcl::feat::TokenBatch batch;
    batch.rows.push_back(row_with_values(16, 12, 0.5, 9));
    const std::vector<int> labels = {1};

    auto loss_once = [&](const ParamStore& p, bool want_grads, std::map<std::string, Matrix>* grads) {
        ebcl::nn::Tape tape;
        auto bound = ebcl::model::bind_params(tape, p, want_grads);
        auto emb = ebcl::model::encode_batch(tape, batch, bound, cfg, false, nullptr);
        auto loss = ebcl::objectives::ocp_loss_g(tape, emb, labels, bound.at("ocp_w"), bound.at("ocp_b"));
        if (want_grads) {
            tape.backward(loss);
            for (const auto& name : p.names())
                if (bound.at(name).node->grad_init) (*grads)[name] = bound.at(name).node->grad;
        }
        return loss.item();
    };

    std::map<std::string, Matrix> grads;
    const double before = loss_once(params, true, &grads);
    Adam opt(1e-4);
    opt.step(params, grads);
    const double after = loss_once(params, false, nullptr);
    CHECK(after < before);
}

TEST_CASE("seeded ebcl pretraining is reproducible") {
    Dataset ds = testsupport::tiny_dataset(10, 60, 5);
    Vocabulary vocab = testsupport::tiny_vocab(ds);
    TrainingData data;
    data.dataset = &ds;
    data.vocab = &vocab;
    PairDataset train = separable_pairs(12, 100);
    PairDataset val = separable_pairs(6, 200);
    data.train_pairs = train;
    data.val_pairs = val;

    EncoderConfig cfg = tiny_config();
    cfg.max_len = 16;
    RunConfig run;
    run.objective = "ebcl";
    run.max_epochs = 3;
    run.early_stop_tolerance = 3;
    run.batch_size = 4;
    run.learning_rate = 1e-3;
    run.seed = 13;

    auto t1 = make_pretrain_trainer(Objective::Ebcl, data, cfg, {}, run.batch_size);
    TrainResult a = pretrain(run, *t1);
    auto t2 = make_pretrain_trainer(Objective::Ebcl, data, cfg, {}, run.batch_size);
    TrainResult b = pretrain(run, *t2);
    REQUIRE(a.provenance.val_trace.size() == b.provenance.val_trace.size());
    for (size_t i = 0; i < a.provenance.val_trace.size(); ++i)
        CHECK(a.provenance.val_trace[i] == b.provenance.val_trace[i]);
    CHECK((a.params.at("proj_pre") - b.params.at("proj_pre")).norm() == 0.0);
}

TEST_CASE("checkpoint save/load round trip is byte-stable") {
    EncoderConfig cfg = tiny_config();
    ParamStore params = ebcl::model::init_encoder_params(cfg, 3, 5, 17);
    Provenance prov;
    prov.objective = "ebcl";
    prov.seed = 17;
    prov.best_epoch = 4;
    prov.best_val = 0.25;
    prov.val_trace = {0.5, 0.3, 0.27, 0.25, 0.26};

    const fs::path dir = fs::temp_directory_path() / "ebcl_ckpt_test";
    fs::remove_all(dir);
    save_checkpoint(dir.string(), params, "{\"encoder\":{}}", "{\"features\":[]}", prov);
    LoadedCheckpoint loaded = load_checkpoint(dir.string());
    CHECK(loaded.provenance.objective == "ebcl");
    CHECK(loaded.provenance.best_epoch == 4);
    CHECK(loaded.provenance.val_trace.size() == 5);
    CHECK(loaded.params.names() == params.names());

    // float32 container: values match to float precision
    for (const auto& name : params.names()) {
        const Matrix& a = params.at(name);
        const Matrix& b = loaded.params.at(name);
        REQUIRE(a.rows() == b.rows());
        for (Eigen::Index r = 0; r < a.rows(); ++r)
            for (Eigen::Index c = 0; c < a.cols(); ++c)
                CHECK(static_cast<float>(a(r, c)) == static_cast<float>(b(r, c)));
    }

    // saving the loaded params again produces an identical tensor container
    const fs::path dir2 = fs::temp_directory_path() / "ebcl_ckpt_test2";
    fs::remove_all(dir2);
    save_checkpoint(dir2.string(), loaded.params, loaded.config_json, loaded.vocab_json, loaded.provenance);
    std::ifstream b1(dir / "params.bin", std::ios::binary), b2(dir2 / "params.bin", std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(b1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(b2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK_FALSE(s1.empty());
}

TEST_CASE("checkpoint validation names missing and mismatched tensors") {
    EncoderConfig cfg = tiny_config();
    ParamStore reference = ebcl::model::init_encoder_params(cfg, 3, 5, 1);

    ParamStore missing;  // drop one tensor, keep the rest
    for (const auto& name : reference.names())
        if (name != "fusion_v") missing.add(name, reference.at(name));
    CHECK_THROWS_WITH_AS(validate_params_match(missing, reference), doctest::Contains("fusion_v"),
                         std::runtime_error);

    // wrong d_token: shape mismatch is named
    EncoderConfig wide = cfg;
    wide.d_token = 16;
    wide.d_ff = 32;
    ParamStore other = ebcl::model::init_encoder_params(wide, 3, 5, 1);
    try {
        validate_params_match(other, reference);
        FAIL("expected mismatch");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
        CHECK(std::string(e.what()).find("time_w1") != std::string::npos);
    }
}

TEST_CASE("asha: rung populations, winner, and sampled ranges") {
    SearchSpec spec;
    spec.n_trials = 16;
    spec.grace_period = 4;
    spec.reduction_factor = 2;
    spec.max_epochs = 32;
    spec.seed = 3;
    MockTrialRunner runner;
    RunConfig base;
    SearchResult result = hyperparameter_search(spec, runner, base);

    // all trials ran the grace period; populations halve at epochs 4, 8, 16, 32
    std::map<int, int> population_at_epoch;
    for (const auto& [id, epochs] : runner.epochs_seen)
        for (int e : epochs) population_at_epoch[e]++;
    CHECK(population_at_epoch[4] == 16);
    CHECK(population_at_epoch[8] == 8);
    CHECK(population_at_epoch[16] == 4);
    CHECK(population_at_epoch[32] == 2);

    // base values are all 1.0 in the mock, so rank ties resolve to trial 0
    CHECK(result.best_trial == 0);

    for (const auto& rec : result.table) {
        CHECK(rec.lr >= 1e-6);
        CHECK(rec.lr <= 1e-2);
        CHECK(rec.dropout >= 0.0);
        CHECK(rec.dropout <= 0.6);
    }

    // determinism of sampled tuples
    MockTrialRunner runner2;
    SearchResult again = hyperparameter_search(spec, runner2, base);
    for (size_t i = 0; i < result.table.size(); ++i) {
        CHECK(result.table[i].lr == again.table[i].lr);
        CHECK(result.table[i].dropout == again.table[i].dropout);
    }

    std::string csv = trial_table_csv(result.table);
    CHECK(csv.find("trial_id,lr,dropout,epochs_run,best_val,promoted_rungs") == 0);
}

TEST_CASE("asha: a diverging trial loses to a healthy one") {
    SearchSpec spec;
    spec.n_trials = 2;
    spec.grace_period = 2;
    spec.reduction_factor = 2;
    spec.max_epochs = 8;
    spec.seed = 4;
    MockTrialRunner runner;
    runner.base = {5.0, 1.0};
    runner.diverging.insert(0);
    RunConfig base;
    SearchResult result = hyperparameter_search(spec, runner, base);
    CHECK(result.best_trial == 1);
    CHECK_THROWS_AS(hyperparameter_search(SearchSpec{.n_trials = 0}, runner, base), std::invalid_argument);
}

TEST_CASE("finetune learns a separable task and honors pre-only mode") {
    EncoderConfig cfg = tiny_config();
    cfg.max_len = 16;
    FinetuneData data;
    data.mode = InputMode::Both;
    data.train = separable_pairs(64, 300);
    data.val = separable_pairs(16, 400);
    data.test = separable_pairs(16, 500);

    RunConfig run;
    run.objective = "task";
    run.learning_rate = 3e-3;
    run.batch_size = 16;
    run.max_epochs = 60;
    run.early_stop_tolerance = 60;
    run.seed = 7;

    FinetuneResult result = finetune(run, cfg, data, nullptr, 2, 3);
    CHECK(result.val_auroc > 0.95);  // overfit smoke on a separable problem
    CHECK(result.test_auroc > 0.9);
    CHECK(result.test_scores.size() == data.test.size());

    // pre-only: the post path must never be touched -> poisoned post rows stay harmless
    FinetuneData pre_only = data;
    pre_only.mode = InputMode::PreOnly;
    for (auto* split : {&pre_only.train, &pre_only.val, &pre_only.test})
        for (auto& p : *split) {
            p.post.mask.assign(p.post.mask.size(), 0);  // encoding these would throw
            p.post.n_valid = 0;
        }
    RunConfig quick = run;
    quick.max_epochs = 2;
    CHECK_NOTHROW(finetune(quick, cfg, pre_only, nullptr, 2, 3));

    // single-class training labels are a configuration error
    FinetuneData degenerate = data;
    for (auto& p : degenerate.train) p.label = 1;
    CHECK_THROWS_WITH_AS(finetune(quick, cfg, degenerate, nullptr, 2, 3), doctest::Contains("single-class"),
                         std::invalid_argument);
}

TEST_CASE("finetune from a checkpoint matches tensors against the config") {
    EncoderConfig cfg = tiny_config();
    cfg.max_len = 16;
    ParamStore pretrained = ebcl::model::init_encoder_params(cfg, 2, 3, 99);
    FinetuneData data;
    data.mode = InputMode::Both;
    data.train = separable_pairs(8, 600);
    data.val = separable_pairs(4, 700);
    data.test = separable_pairs(4, 800);
    RunConfig run;
    run.objective = "task";
    run.max_epochs = 1;
    run.batch_size = 4;
    FinetuneResult result = finetune(run, cfg, data, &pretrained, 2, 3);
    CHECK(result.test_scores.size() == 4);
}
