#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ebcl/analysis.hpp"
#include "ebcl/encoder.hpp"
#include "ebcl/evaluation.hpp"
#include "ebcl/events.hpp"
#include "ebcl/featurizer.hpp"
#include "ebcl/objectives.hpp"
#include "ebcl/synth.hpp"
#include "ebcl/training.hpp"

namespace ebcl::pipeline {

/// Flat pipeline configuration; defaults carry the documented paper-derived
/// values. Serialized as a single JSON document.
struct Config {
    std::string data_path;      // event-stream JSONL; default <workdir>/cohort.jsonl
    std::string outcomes_path;  // outcome JSONL; default <workdir>/outcomes.jsonl
    std::string workdir = "ebcl-work";

    events::DetectorConfig detector;
    int tau = 512;
    int min_len = 16;
    int censor_pre = 0;
    int censor_post = 0;

    int vocab_min_count = 0;  // 0 = rate-scaled default

    model::EncoderConfig encoder;
    objectives::DuettConfig duett;

    std::string objective = "ebcl";  // pretraining objective; "random" allowed for probe/knn/cluster
    std::string task = "mortality";
    events::InputMode input_mode = events::InputMode::Both;

    events::SplitSpec split;

    training::RunConfig pretrain;        // objective filled from `objective`
    training::RunConfig finetune;        // objective filled from `task`
    bool search_enabled = false;
    training::SearchSpec search;

    double strats_window_days = 6.0;

    int cluster_k = 0;  // 0 = elbow-selected
    int cluster_k_min = 2;
    int cluster_k_max = 12;
    int cluster_n_init = 10;

    std::vector<double> l2_grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};

    synth::GeneratorConfig generator;

    uint64_t seed = 0;
    std::vector<uint64_t> finetune_seeds = {0, 1, 2, 3, 4};

    bool export_embeddings = false;

    static Config defaults();
    std::string to_json_text() const;
    static Config from_json_text(const std::string& text);
    static Config load(const std::string& path);
    void validate() const;
};

/// FNV-1a64 over the canonical JSON dump, as a 16-hex-digit string.
std::string config_hash(const Config& config);

/// Runs one subcommand; returns a process exit status. Stage artifacts are
/// stamped with the config hash + seed, and an existing primary artifact is
/// never overwritten without force.
int run_stage(const std::string& subcommand, const Config& config, bool force);

// Individual stages (same contract as run_stage).
int run_generate(const Config& config, bool force);
int run_preprocess(const Config& config, bool force);
int run_pretrain(const Config& config, bool force);
int run_finetune(const Config& config, bool force);
int run_probe(const Config& config, bool force);
int run_knn(const Config& config, bool force);
int run_cluster(const Config& config, bool force);
int run_report(const Config& config, bool force);

// --- building blocks shared with tests ---------------------------------------

struct PreparedData {
    events::Dataset dataset;
    events::SplitResult split;
    feat::Vocabulary vocab;
};

PreparedData load_prepared(const Config& config);

/// Window pairs for the given patient ids under the config's detector and
/// window settings (no labels attached).
std::vector<events::WindowPair> extract_pairs(const Config& config, const events::Dataset& dataset,
                                              const std::vector<std::string>& patient_ids);

/// Labeled + encoded pairs for the config task (leakage rule applied).
objectives::PairDataset labeled_pairs(const Config& config, const events::Dataset& dataset,
                                      const feat::Vocabulary& vocab, const std::vector<std::string>& patient_ids,
                                      const std::map<std::string, std::vector<events::OutcomeRecord>>& outcomes);

training::TrainingData build_training_data(const Config& config, const PreparedData& prepared,
                                           std::vector<events::WindowPair>& train_pairs_storage,
                                           std::vector<events::WindowPair>& val_pairs_storage,
                                           std::vector<const events::PatientTrajectory*>& traj_storage);

/// Encoder parameters for the configured objective: loaded from the stage
/// checkpoint, or freshly initialized when objective == "random".
model::ParamStore load_or_init_encoder(const Config& config, const feat::Vocabulary& vocab);

eval::EmbeddingTable embed_pairs(const Config& config, const model::ParamStore& params,
                                 const events::Dataset& dataset, const feat::Vocabulary& vocab,
                                 const objectives::PairDataset& pairs, const std::string& split_name);

std::string checkpoint_dir(const Config& config);
std::string finetune_checkpoint_dir(const Config& config, uint64_t seed);

/// mean +/- std table over per-seed reports, in the method-by-task layout.
struct ReportTable {
    std::vector<std::string> methods;  // rows
    std::vector<std::string> tasks;    // columns
    std::vector<std::vector<std::string>> cells;
    std::string to_markdown() const;
    std::string to_csv() const;
};

ReportTable aggregate_reports(const std::vector<eval::EvalReport>& reports,
                              const std::vector<std::string>& method_names);

}  // namespace ebcl::pipeline
