#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ebcl/encoder.hpp"
#include "ebcl/events.hpp"
#include "ebcl/objectives.hpp"

namespace ebcl::training {

struct RunConfig {
    std::string objective = "ebcl";  // objective name (pretrain) or task name (finetune)
    double learning_rate = 1e-3;
    double dropout = 0.0;
    int batch_size = 64;
    int max_epochs = 300;
    int early_stop_tolerance = 3;
    uint64_t seed = 0;
    std::string init_checkpoint;

    void validate() const;
};

struct SearchSpec {
    int n_trials = 16;
    double lr_low = 1e-6;
    double lr_high = 1e-2;
    double dropout_low = 0.0;
    double dropout_high = 0.6;
    int grace_period = 4;
    int reduction_factor = 2;
    int max_epochs = 32;
    uint64_t seed = 0;
};

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(model::ParamStore& params, const std::map<std::string, nn::Matrix>& grads);
    double lr() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, nn::Matrix> m_, v_;
};

struct Provenance {
    std::string objective;
    uint64_t seed = 0;
    int best_epoch = 0;  // 1-based
    double best_val = 0.0;
    std::vector<double> val_trace;
};

struct TrainResult {
    model::ParamStore params;  // parameters of the best-validation epoch
    Provenance provenance;
};

/// One pretraining objective wired to its data. train_epoch returns the mean
/// train loss; validation_loss must be deterministic given the parameters.
class ObjectiveTrainer {
public:
    virtual ~ObjectiveTrainer() = default;
    virtual model::ParamStore init_params(uint64_t seed) const = 0;
    virtual double train_epoch(model::ParamStore& params, Adam& opt, double dropout, std::mt19937_64& rng) = 0;
    virtual double validation_loss(const model::ParamStore& params) const = 0;
};

struct TrainingData {
    const events::Dataset* dataset = nullptr;
    const feat::Vocabulary* vocab = nullptr;
    objectives::PairDataset train_pairs;
    objectives::PairDataset val_pairs;
    std::vector<events::WindowPair> train_raw_pairs;  // duett rebins these
    std::vector<events::WindowPair> val_raw_pairs;
    std::vector<const events::PatientTrajectory*> train_trajs;  // ocp / strats
    std::vector<const events::PatientTrajectory*> val_trajs;
    double strats_window_days = 6.0;
};

std::unique_ptr<ObjectiveTrainer> make_pretrain_trainer(objectives::Objective objective, const TrainingData& data,
                                                        const model::EncoderConfig& encoder_config,
                                                        const objectives::DuettConfig& duett_config,
                                                        int batch_size);

/// Early-stopped epoch loop; retains the parameters of the best-validation
/// epoch, stops after early_stop_tolerance epochs without improvement.
/// Throws on a non-finite loss.
TrainResult pretrain(const RunConfig& run, ObjectiveTrainer& trainer);

/// Held-out in-batch top-1 retrieval accuracy of pre -> post similarity.
double ebcl_retrieval_top1(const model::ParamStore& params, const model::EncoderConfig& config,
                           const objectives::PairDataset& pairs, int batch_size, uint64_t seed);

/// OCP swap-detection accuracy on a fixed example set.
double ocp_accuracy(const model::ParamStore& params, const model::EncoderConfig& config,
                    const std::vector<objectives::OcpExample>& examples);

struct FinetuneData {
    objectives::PairDataset train;
    objectives::PairDataset val;
    objectives::PairDataset test;
    events::InputMode mode = events::InputMode::Both;
};

struct FinetuneResult {
    model::ParamStore params;
    Provenance provenance;  // val_trace holds per-epoch validation AUROC
    std::vector<double> test_scores;
    std::vector<int> test_labels;
    double val_auroc = 0.0;
    double test_auroc = 0.0;
    double test_auprc = 0.0;
};

/// BCE finetuning of encoder + one-hidden-layer head over concat(pre, post)
/// (or a single side); encoder unfrozen; model selection by validation AUROC.
/// init_params == nullptr reproduces the randomly initialized supervised
/// baseline.
FinetuneResult finetune(const RunConfig& run, const model::EncoderConfig& config, const FinetuneData& data,
                        const model::ParamStore* init_params, int n_features, int n_cat_ids);

/// Scores (sigmoid of the head logit) for each pair under given parameters.
std::vector<double> finetune_scores(const model::ParamStore& params, const model::EncoderConfig& config,
                                    const objectives::PairDataset& pairs, events::InputMode mode, int batch_size);

// --- Hyperparameter search ---------------------------------------------------

struct TrialRecord {
    int trial_id = 0;
    double lr = 0.0;
    double dropout = 0.0;
    int epochs_run = 0;
    double best_val = 0.0;
    int promoted_rungs = 0;
};

/// Resumable per-trial training driven by the search loop.
class TrialRunner {
public:
    virtual ~TrialRunner() = default;
    virtual void ensure_trial(int trial_id, double lr, double dropout) = 0;
    /// Train trial to the given epoch and return its validation loss
    /// (+inf on divergence).
    virtual double run_to_epoch(int trial_id, int epoch) = 0;
};

struct SearchResult {
    RunConfig best;
    int best_trial = -1;
    std::vector<TrialRecord> table;
};

/// Synchronous successive halving: every trial runs grace_period epochs, the
/// top 1/r by validation loss survive each rung at grace * r^k.
SearchResult hyperparameter_search(const SearchSpec& spec, TrialRunner& runner, const RunConfig& base);

/// Trial runner backed by real pretraining trainers (one optimizer and
/// parameter state per trial, resumed between rungs).
class PretrainTrialRunner : public TrialRunner {
public:
    PretrainTrialRunner(objectives::Objective objective, const TrainingData& data,
                        const model::EncoderConfig& encoder_config, const objectives::DuettConfig& duett_config,
                        const RunConfig& base);
    ~PretrainTrialRunner() override;
    void ensure_trial(int trial_id, double lr, double dropout) override;
    double run_to_epoch(int trial_id, int epoch) override;

private:
    struct Trial;
    objectives::Objective objective_;
    const TrainingData& data_;
    model::EncoderConfig encoder_config_;
    objectives::DuettConfig duett_config_;
    RunConfig base_;
    std::vector<std::unique_ptr<Trial>> trials_;
};

std::string trial_table_csv(const std::vector<TrialRecord>& table);

// --- Checkpoints --------------------------------------------------------------

/// Checkpoint directory: manifest.json (tensor shapes/offsets + provenance),
/// params.bin (flat little-endian float32), config.json, vocab.json.
/// Written atomically (temp dir + rename).
void save_checkpoint(const std::string& dir, const model::ParamStore& params, const std::string& config_json,
                     const std::string& vocab_json, const Provenance& provenance);

struct LoadedCheckpoint {
    model::ParamStore params;
    std::string config_json;
    std::string vocab_json;
    Provenance provenance;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

/// Same tensor names and shapes as the reference; errors name every missing
/// or mismatched tensor.
void validate_params_match(const model::ParamStore& loaded, const model::ParamStore& reference);

}  // namespace ebcl::training
