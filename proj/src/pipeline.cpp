#include "ebcl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ebcl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json encoder_to_json(const model::EncoderConfig& c) {
    return json{{"d_token", c.d_token}, {"n_layers", c.n_layers}, {"d_ff", c.d_ff},     {"n_heads", c.n_heads},
                {"max_len", c.max_len}, {"d_embed", c.d_embed},   {"dropout", c.dropout}};
}

model::EncoderConfig encoder_from_json(const json& j) {
    model::EncoderConfig c;
    c.d_token = j.at("d_token").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.d_embed = j.at("d_embed").get<int>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}

json run_to_json(const training::RunConfig& r) {
    return json{{"learning_rate", r.learning_rate},
                {"dropout", r.dropout},
                {"batch_size", r.batch_size},
                {"max_epochs", r.max_epochs},
                {"early_stop_tolerance", r.early_stop_tolerance}};
}

training::RunConfig run_from_json(const json& j) {
    training::RunConfig r;
    r.learning_rate = j.at("learning_rate").get<double>();
    r.dropout = j.at("dropout").get<double>();
    r.batch_size = j.at("batch_size").get<int>();
    r.max_epochs = j.at("max_epochs").get<int>();
    r.early_stop_tolerance = j.at("early_stop_tolerance").get<int>();
    return r;
}

std::vector<events::EventKind> kinds_from_names(const std::vector<std::string>& names) {
    std::vector<events::EventKind> kinds;
    for (const auto& n : names) {
        if (n == "admission") kinds.push_back(events::EventKind::Admission);
        else if (n == "discharge") kinds.push_back(events::EventKind::Discharge);
        else if (n == "hypotension") kinds.push_back(events::EventKind::Hypotension);
        else if (n == "ventilation_start") kinds.push_back(events::EventKind::VentilationStart);
        else if (n == "outpatient_visit") kinds.push_back(events::EventKind::OutpatientVisit);
        else throw std::invalid_argument("unknown detector event kind: " + n);
    }
    return kinds;
}

std::vector<std::string> kind_names(const std::vector<events::EventKind>& kinds) {
    std::vector<std::string> names;
    for (auto k : kinds) names.emplace_back(events::to_string(k));
    return names;
}

}  // namespace

Config Config::defaults() {
    Config c;
    c.pretrain.max_epochs = 300;
    c.pretrain.early_stop_tolerance = 3;
    c.pretrain.batch_size = 64;
    c.pretrain.learning_rate = 1e-3;
    c.finetune.max_epochs = 100;
    c.finetune.early_stop_tolerance = 3;
    c.finetune.batch_size = 128;
    c.finetune.learning_rate = 1e-3;
    return c;
}

std::string Config::to_json_text() const {
    json j;
    j["paths"] = {{"data", data_path}, {"outcomes", outcomes_path}, {"workdir", workdir}};
    j["detector"] = {{"events", kind_names(detector.kinds)},
                     {"map_feature", detector.map_feature},
                     {"hypotension_threshold", detector.hypotension_threshold}};
    j["window"] = {{"tau", tau}, {"min_len", min_len}, {"censor_pre", censor_pre}, {"censor_post", censor_post}};
    j["vocab"] = {{"min_count", vocab_min_count}};
    j["encoder"] = encoder_to_json(encoder);
    j["duett"] = {{"n_bins", duett.n_bins},   {"top_k", duett.top_k},           {"d_model", duett.d_model},
                  {"n_heads", duett.n_heads}, {"d_ff", duett.d_ff},             {"n_layers_time", duett.n_layers_time},
                  {"n_layers_feat", duett.n_layers_feat}, {"mask_rate", duett.mask_rate}};
    j["objective"] = objective;
    j["task"] = task;
    j["input_mode"] = events::to_string(input_mode);
    j["split"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}, {"seed", split.seed}};
    j["pretrain"] = run_to_json(pretrain);
    j["finetune"] = run_to_json(finetune);
    j["search"] = {{"enabled", search_enabled},
                   {"n_trials", search.n_trials},
                   {"lr_low", search.lr_low},
                   {"lr_high", search.lr_high},
                   {"dropout_low", search.dropout_low},
                   {"dropout_high", search.dropout_high},
                   {"grace_period", search.grace_period},
                   {"reduction_factor", search.reduction_factor},
                   {"max_epochs", search.max_epochs}};
    j["strats_window_days"] = strats_window_days;
    j["cluster"] = {{"k", cluster_k}, {"k_min", cluster_k_min}, {"k_max", cluster_k_max}, {"n_init", cluster_n_init}};
    j["l2_grid"] = l2_grid;
    j["generator"] = {{"n_patients", generator.n_patients},
                      {"n_static_features", generator.n_static_features},
                      {"n_static_values", generator.n_static_values},
                      {"n_oscillating_features", generator.n_oscillating_features},
                      {"events_min", generator.events_min},
                      {"events_max", generator.events_max},
                      {"obs_rate", generator.obs_rate},
                      {"span_days", generator.span_days},
                      {"trend_shift_scale", generator.trend_shift_scale},
                      {"post_trend_decay_days", generator.post_trend_decay_days},
                      {"baseline_slope_std", generator.baseline_slope_std},
                      {"osc_amplitude", generator.osc_amplitude},
                      {"period_days_min", generator.period_days_min},
                      {"period_days_max", generator.period_days_max},
                      {"noise_std", generator.noise_std},
                      {"outcome_slope", generator.outcome_slope},
                      {"outcome_intercept", generator.outcome_intercept},
                      {"outcome_delay_mean_days", generator.outcome_delay_mean_days},
                      {"n_outpatient_visits", generator.n_outpatient_visits},
                      {"seed", generator.seed}};
    j["seed"] = seed;
    j["finetune_seeds"] = finetune_seeds;
    j["export_embeddings"] = export_embeddings;
    return j.dump(2);
}

Config Config::from_json_text(const std::string& text) {
    json j = json::parse(text);
    Config c = defaults();
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        if (p.contains("data")) c.data_path = p.at("data").get<std::string>();
        if (p.contains("outcomes")) c.outcomes_path = p.at("outcomes").get<std::string>();
        if (p.contains("workdir")) c.workdir = p.at("workdir").get<std::string>();
    }
    if (j.contains("detector")) {
        const auto& d = j.at("detector");
        if (d.contains("events")) c.detector.kinds = kinds_from_names(d.at("events").get<std::vector<std::string>>());
        if (d.contains("map_feature")) c.detector.map_feature = d.at("map_feature").get<std::string>();
        if (d.contains("hypotension_threshold"))
            c.detector.hypotension_threshold = d.at("hypotension_threshold").get<double>();
    }
    if (j.contains("window")) {
        const auto& w = j.at("window");
        if (w.contains("tau")) c.tau = w.at("tau").get<int>();
        if (w.contains("min_len")) c.min_len = w.at("min_len").get<int>();
        if (w.contains("censor_pre")) c.censor_pre = w.at("censor_pre").get<int>();
        if (w.contains("censor_post")) c.censor_post = w.at("censor_post").get<int>();
    }
    if (j.contains("vocab") && j.at("vocab").contains("min_count"))
        c.vocab_min_count = j.at("vocab").at("min_count").get<int>();
    if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"));
    if (j.contains("duett")) {
        const auto& d = j.at("duett");
        if (d.contains("n_bins")) c.duett.n_bins = d.at("n_bins").get<int>();
        if (d.contains("top_k")) c.duett.top_k = d.at("top_k").get<int>();
        if (d.contains("d_model")) c.duett.d_model = d.at("d_model").get<int>();
        if (d.contains("n_heads")) c.duett.n_heads = d.at("n_heads").get<int>();
        if (d.contains("d_ff")) c.duett.d_ff = d.at("d_ff").get<int>();
        if (d.contains("n_layers_time")) c.duett.n_layers_time = d.at("n_layers_time").get<int>();
        if (d.contains("n_layers_feat")) c.duett.n_layers_feat = d.at("n_layers_feat").get<int>();
        if (d.contains("mask_rate")) c.duett.mask_rate = d.at("mask_rate").get<double>();
    }
    if (j.contains("objective")) c.objective = j.at("objective").get<std::string>();
    if (j.contains("task")) c.task = j.at("task").get<std::string>();
    if (j.contains("input_mode")) c.input_mode = events::input_mode_from_string(j.at("input_mode").get<std::string>());
    if (j.contains("split")) {
        const auto& s = j.at("split");
        if (s.contains("train")) c.split.train = s.at("train").get<double>();
        if (s.contains("val")) c.split.val = s.at("val").get<double>();
        if (s.contains("test")) c.split.test = s.at("test").get<double>();
        if (s.contains("seed")) c.split.seed = s.at("seed").get<uint64_t>();
    }
    if (j.contains("pretrain")) c.pretrain = run_from_json(j.at("pretrain"));
    if (j.contains("finetune")) c.finetune = run_from_json(j.at("finetune"));
    if (j.contains("search")) {
        const auto& s = j.at("search");
        if (s.contains("enabled")) c.search_enabled = s.at("enabled").get<bool>();
        if (s.contains("n_trials")) c.search.n_trials = s.at("n_trials").get<int>();
        if (s.contains("lr_low")) c.search.lr_low = s.at("lr_low").get<double>();
        if (s.contains("lr_high")) c.search.lr_high = s.at("lr_high").get<double>();
        if (s.contains("dropout_low")) c.search.dropout_low = s.at("dropout_low").get<double>();
        if (s.contains("dropout_high")) c.search.dropout_high = s.at("dropout_high").get<double>();
        if (s.contains("grace_period")) c.search.grace_period = s.at("grace_period").get<int>();
        if (s.contains("reduction_factor")) c.search.reduction_factor = s.at("reduction_factor").get<int>();
        if (s.contains("max_epochs")) c.search.max_epochs = s.at("max_epochs").get<int>();
    }
    if (j.contains("strats_window_days")) c.strats_window_days = j.at("strats_window_days").get<double>();
    if (j.contains("cluster")) {
        const auto& k = j.at("cluster");
        if (k.contains("k")) c.cluster_k = k.at("k").get<int>();
        if (k.contains("k_min")) c.cluster_k_min = k.at("k_min").get<int>();
        if (k.contains("k_max")) c.cluster_k_max = k.at("k_max").get<int>();
        if (k.contains("n_init")) c.cluster_n_init = k.at("n_init").get<int>();
    }
    if (j.contains("l2_grid")) c.l2_grid = j.at("l2_grid").get<std::vector<double>>();
    if (j.contains("generator")) {
        const auto& g = j.at("generator");
        auto& gc = c.generator;
        if (g.contains("n_patients")) gc.n_patients = g.at("n_patients").get<int>();
        if (g.contains("n_static_features")) gc.n_static_features = g.at("n_static_features").get<int>();
        if (g.contains("n_static_values")) gc.n_static_values = g.at("n_static_values").get<int>();
        if (g.contains("n_oscillating_features"))
            gc.n_oscillating_features = g.at("n_oscillating_features").get<int>();
        if (g.contains("events_min")) gc.events_min = g.at("events_min").get<int>();
        if (g.contains("events_max")) gc.events_max = g.at("events_max").get<int>();
        if (g.contains("obs_rate")) gc.obs_rate = g.at("obs_rate").get<double>();
        if (g.contains("span_days")) gc.span_days = g.at("span_days").get<double>();
        if (g.contains("trend_shift_scale")) gc.trend_shift_scale = g.at("trend_shift_scale").get<double>();
        if (g.contains("post_trend_decay_days"))
            gc.post_trend_decay_days = g.at("post_trend_decay_days").get<double>();
        if (g.contains("baseline_slope_std")) gc.baseline_slope_std = g.at("baseline_slope_std").get<double>();
        if (g.contains("osc_amplitude")) gc.osc_amplitude = g.at("osc_amplitude").get<double>();
        if (g.contains("period_days_min")) gc.period_days_min = g.at("period_days_min").get<double>();
        if (g.contains("period_days_max")) gc.period_days_max = g.at("period_days_max").get<double>();
        if (g.contains("noise_std")) gc.noise_std = g.at("noise_std").get<double>();
        if (g.contains("outcome_slope")) gc.outcome_slope = g.at("outcome_slope").get<double>();
        if (g.contains("outcome_intercept")) gc.outcome_intercept = g.at("outcome_intercept").get<double>();
        if (g.contains("outcome_delay_mean_days"))
            gc.outcome_delay_mean_days = g.at("outcome_delay_mean_days").get<double>();
        if (g.contains("n_outpatient_visits")) gc.n_outpatient_visits = g.at("n_outpatient_visits").get<int>();
        if (g.contains("seed")) gc.seed = g.at("seed").get<uint64_t>();
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("finetune_seeds")) c.finetune_seeds = j.at("finetune_seeds").get<std::vector<uint64_t>>();
    if (j.contains("export_embeddings")) c.export_embeddings = j.at("export_embeddings").get<bool>();
    return c;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

void Config::validate() const {
    if (workdir.empty()) throw std::invalid_argument("config: workdir must be set");
    if (tau < min_len || min_len < 1) throw std::invalid_argument("config: need tau >= min_len >= 1");
    if (censor_pre < 0 || censor_post < 0) throw std::invalid_argument("config: censor counts must be >= 0");
    encoder.validate();
    if (objective != "random") objectives::objective_from_string(objective);
}

std::string config_hash(const Config& config) {
    const std::string dump = config.to_json_text();
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

struct WorkdirLock {
    fs::path path;
    explicit WorkdirLock(const fs::path& workdir) : path(workdir / ".lock") {
        fs::create_directories(workdir);
        std::FILE* f = std::fopen(path.string().c_str(), "wx");
        if (!f) throw std::runtime_error("workdir is locked by another process: " + path.string());
        std::fclose(f);
    }
    ~WorkdirLock() {
        std::error_code ec;
        fs::remove(path, ec);
    }
};

void guard_overwrite(const fs::path& artifact, const Config& config, bool force) {
    if (fs::exists(artifact) && !force)
        throw std::runtime_error("artifact exists: " + artifact.string() + " (config hash " + config_hash(config) +
                                 "); pass --force to overwrite");
}

json stamp(const Config& config) { return json{{"config_hash", config_hash(config)}, {"seed", config.seed}}; }

void write_stamped_sidecar(const fs::path& artifact, const Config& config) {
    std::ofstream out(artifact.string() + ".stamp.json");
    out << stamp(config).dump(2) << "\n";
}

std::string data_file(const Config& c) {
    return c.data_path.empty() ? (fs::path(c.workdir) / "cohort.jsonl").string() : c.data_path;
}

std::string outcomes_file(const Config& c) {
    return c.outcomes_path.empty() ? (fs::path(c.workdir) / "outcomes.jsonl").string() : c.outcomes_path;
}

int default_tolerance(const std::string& objective) {
    return (objective == "ocp" || objective == "duett") ? 10 : 3;
}

}  // namespace

std::string checkpoint_dir(const Config& config) {
    return (fs::path(config.workdir) / "checkpoints" / (config.objective + "_seed" + std::to_string(config.seed)))
        .string();
}

std::string finetune_checkpoint_dir(const Config& config, uint64_t seed) {
    return (fs::path(config.workdir) / "checkpoints" /
            ("finetune_" + config.objective + "_" + config.task + "_seed" + std::to_string(seed)))
        .string();
}

PreparedData load_prepared(const Config& config) {
    PreparedData out;
    out.dataset = events::ingest_file(data_file(config));
    out.split = events::read_split_manifest((fs::path(config.workdir) / "splits.json").string());
    out.vocab = feat::read_vocabulary((fs::path(config.workdir) / "vocab.json").string());
    return out;
}

std::vector<events::WindowPair> extract_pairs(const Config& config, const events::Dataset& dataset,
                                              const std::vector<std::string>& patient_ids) {
    std::set<std::string> wanted(patient_ids.begin(), patient_ids.end());
    std::vector<events::WindowPair> out;
    for (const auto& traj : dataset.patients) {
        if (!wanted.count(traj.patient_id)) continue;
        for (const auto& ev : events::detect_events(dataset, traj, config.detector)) {
            auto pair = events::extract_window_pair(traj, ev, config.tau, config.min_len, config.censor_pre,
                                                    config.censor_post);
            if (pair) out.push_back(std::move(*pair));
        }
    }
    return out;
}

objectives::PairDataset labeled_pairs(const Config& config, const events::Dataset& dataset,
                                      const feat::Vocabulary& vocab, const std::vector<std::string>& patient_ids,
                                      const std::map<std::string, std::vector<events::OutcomeRecord>>& outcomes) {
    events::LabelRule rule;
    rule.task_modes[config.task] = config.input_mode;
    std::vector<events::WindowPair> labeled;
    for (auto& pair : extract_pairs(config, dataset, patient_ids)) {
        auto it = outcomes.find(pair.event.patient_id);
        if (it == outcomes.end()) continue;
        auto with_label = events::attach_label(pair, it->second, config.task, rule);
        if (with_label) labeled.push_back(std::move(*with_label));
    }
    return objectives::encode_pairs(labeled, dataset, vocab, config.encoder.max_len, config.min_len);
}

training::TrainingData build_training_data(const Config& config, const PreparedData& prepared,
                                           std::vector<events::WindowPair>& train_pairs_storage,
                                           std::vector<events::WindowPair>& val_pairs_storage,
                                           std::vector<const events::PatientTrajectory*>& traj_storage) {
    training::TrainingData data;
    data.dataset = &prepared.dataset;
    data.vocab = &prepared.vocab;
    data.strats_window_days = config.strats_window_days;

    train_pairs_storage = extract_pairs(config, prepared.dataset, prepared.split.train_ids);
    val_pairs_storage = extract_pairs(config, prepared.dataset, prepared.split.val_ids);
    data.train_raw_pairs = train_pairs_storage;
    data.val_raw_pairs = val_pairs_storage;
    data.train_pairs = objectives::encode_pairs(train_pairs_storage, prepared.dataset, prepared.vocab,
                                                config.encoder.max_len, config.min_len);
    data.val_pairs = objectives::encode_pairs(val_pairs_storage, prepared.dataset, prepared.vocab,
                                              config.encoder.max_len, config.min_len);

    std::set<std::string> train_ids(prepared.split.train_ids.begin(), prepared.split.train_ids.end());
    std::set<std::string> val_ids(prepared.split.val_ids.begin(), prepared.split.val_ids.end());
    traj_storage.clear();
    for (const auto& traj : prepared.dataset.patients) {
        if (train_ids.count(traj.patient_id)) data.train_trajs.push_back(&traj);
        else if (val_ids.count(traj.patient_id)) data.val_trajs.push_back(&traj);
    }
    return data;
}

model::ParamStore load_or_init_encoder(const Config& config, const feat::Vocabulary& vocab) {
    if (config.objective == "random")
        return model::init_encoder_params(config.encoder, vocab.n_features(), vocab.n_cat_ids, config.seed);
    training::LoadedCheckpoint ckpt = training::load_checkpoint(checkpoint_dir(config));
    model::EncoderConfig stored = encoder_from_json(json::parse(ckpt.config_json).at("encoder"));
    if (stored.d_token != config.encoder.d_token || stored.d_embed != config.encoder.d_embed ||
        stored.n_layers != config.encoder.n_layers)
        throw std::runtime_error("checkpoint encoder config does not match the pipeline config");
    return std::move(ckpt.params);
}

eval::EmbeddingTable embed_pairs(const Config& config, const model::ParamStore& params,
                                 const events::Dataset& dataset, const feat::Vocabulary& vocab,
                                 const objectives::PairDataset& pairs, const std::string& split_name) {
    (void)dataset;
    (void)vocab;
    eval::EmbeddingTable table;
    table.split = split_name;
    table.checkpoint_id = config.objective + "_seed" + std::to_string(config.seed);
    const int B = 64;
    for (size_t at = 0; at < pairs.size(); at += B) {
        const size_t end = std::min(pairs.size(), at + B);
        feat::TokenBatch pre, post;
        for (size_t i = at; i < end; ++i) {
            pre.rows.push_back(pairs[i].pre);
            post.rows.push_back(pairs[i].post);
        }
        nn::Matrix e_pre = model::encode(pre, params, config.encoder);
        nn::Matrix e_post = model::encode(post, params, config.encoder);
        for (size_t i = at; i < end; ++i) {
            eval::EmbeddingRow row;
            row.patient_id = pairs[i].patient_id;
            row.event_time = pairs[i].event_time;
            row.pre = e_pre.row(static_cast<Eigen::Index>(i - at)).transpose();
            row.post = e_post.row(static_cast<Eigen::Index>(i - at)).transpose();
            if (pairs[i].label >= 0) row.labels[config.task] = pairs[i].label;
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

// --- stages --------------------------------------------------------------------

int run_generate(const Config& config, bool force) {
    config.validate();
    WorkdirLock lock(config.workdir);
    const fs::path wd(config.workdir);
    const fs::path cohort = wd / "cohort.jsonl";
    guard_overwrite(cohort, config, force);

    synth::SynthResult result = synth::generate(config.generator);
    synth::write_dataset_jsonl(result.dataset, cohort.string());
    synth::write_outcomes_jsonl(result.outcomes, (wd / "outcomes.jsonl").string());
    synth::write_ground_truth_jsonl(result.ground_truth, (wd / "ground_truth.jsonl").string());
    write_stamped_sidecar(cohort, config);
    std::cout << "generated " << result.dataset.patients.size() << " patients, "
              << result.dataset.total_observations() << " observations, " << result.outcomes.size() << " outcomes\n";
    return 0;
}

int run_preprocess(const Config& config, bool force) {
    config.validate();
    WorkdirLock lock(config.workdir);
    const fs::path wd(config.workdir);
    const fs::path vocab_path = wd / "vocab.json";
    guard_overwrite(vocab_path, config, force);

    events::Dataset dataset = events::ingest_file(data_file(config));
    events::validate_detector(dataset, config.detector);
    events::SplitResult split = events::split_by_patient(dataset, config.split);
    events::write_split_manifest(split, (wd / "splits.json").string());

    events::Dataset train = events::subset(dataset, split.train_ids);
    const int min_count =
        config.vocab_min_count > 0 ? config.vocab_min_count : feat::default_min_count(train.total_observations());
    feat::Vocabulary vocab = feat::build_vocabulary(train, min_count);

    std::vector<events::WindowPair> train_pairs = extract_pairs(config, dataset, split.train_ids);
    vocab.time_std = feat::compute_time_std(train_pairs);
    feat::write_vocabulary(vocab, vocab_path.string());
    write_stamped_sidecar(vocab_path, config);

    json summary;
    summary["stamp"] = stamp(config);
    summary["n_patients"] = dataset.patients.size();
    summary["n_features_retained"] = vocab.n_features();
    summary["min_count"] = min_count;
    summary["time_std"] = vocab.time_std;
    summary["n_train_pairs"] = train_pairs.size();
    std::ofstream out(wd / "preprocess.json");
    out << summary.dump(2) << "\n";
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int run_pretrain(const Config& config, bool force) {
    config.validate();
    if (config.objective == "random") throw std::invalid_argument("pretrain: objective 'random' cannot be trained");
    WorkdirLock lock(config.workdir);
    const fs::path ckpt_dir(checkpoint_dir(config));
    guard_overwrite(ckpt_dir, config, force);

    PreparedData prepared = load_prepared(config);
    std::vector<events::WindowPair> train_storage, val_storage;
    std::vector<const events::PatientTrajectory*> traj_storage;
    training::TrainingData data = build_training_data(config, prepared, train_storage, val_storage, traj_storage);

    const objectives::Objective objective = objectives::objective_from_string(config.objective);
    training::RunConfig run = config.pretrain;
    run.objective = config.objective;
    run.seed = config.seed;
    if (run.early_stop_tolerance <= 0) run.early_stop_tolerance = default_tolerance(config.objective);

    if (config.search_enabled) {
        training::PretrainTrialRunner runner(objective, data, config.encoder, config.duett, run);
        training::SearchSpec spec = config.search;
        spec.seed = config.seed;
        training::SearchResult search = training::hyperparameter_search(spec, runner, run);
        run.learning_rate = search.best.learning_rate;
        run.dropout = search.best.dropout;
        std::ofstream trials((fs::path(config.workdir) / ("trials_" + config.objective + ".csv")).string());
        trials << training::trial_table_csv(search.table);
        std::cout << "search selected lr=" << run.learning_rate << " dropout=" << run.dropout << "\n";
    }

    auto trainer = training::make_pretrain_trainer(objective, data, config.encoder, config.duett, run.batch_size);
    training::TrainResult result = training::pretrain(run, *trainer);

    json ckpt_config;
    ckpt_config["encoder"] = encoder_to_json(config.encoder);
    ckpt_config["objective"] = config.objective;
    ckpt_config["stamp"] = stamp(config);
    training::save_checkpoint(ckpt_dir.string(), result.params, ckpt_config.dump(2),
                              feat::vocabulary_to_json(prepared.vocab), result.provenance);
    std::cout << "pretrained " << config.objective << ": best epoch " << result.provenance.best_epoch << ", val loss "
              << result.provenance.best_val << " (" << result.provenance.val_trace.size() << " epochs)\n";
    return 0;
}

int run_finetune(const Config& config, bool force) {
    config.validate();
    WorkdirLock lock(config.workdir);
    const fs::path wd(config.workdir);
    fs::create_directories(wd / "reports");

    PreparedData prepared = load_prepared(config);
    auto outcomes = events::outcomes_by_patient(events::read_outcomes_file(outcomes_file(config)));

    training::FinetuneData data;
    data.mode = config.input_mode;
    data.train = labeled_pairs(config, prepared.dataset, prepared.vocab, prepared.split.train_ids, outcomes);
    data.val = labeled_pairs(config, prepared.dataset, prepared.vocab, prepared.split.val_ids, outcomes);
    data.test = labeled_pairs(config, prepared.dataset, prepared.vocab, prepared.split.test_ids, outcomes);

    model::ParamStore init;
    const model::ParamStore* init_ptr = nullptr;
    if (config.objective != "random") {
        Config base = config;
        training::LoadedCheckpoint ckpt = training::load_checkpoint(checkpoint_dir(base));
        init = std::move(ckpt.params);
        init_ptr = &init;
    }

    for (uint64_t seed : config.finetune_seeds) {
        const fs::path report_path =
            wd / "reports" / ("finetune_" + config.objective + "_" + config.task + "_seed" + std::to_string(seed) +
                              ".json");
        guard_overwrite(report_path, config, force);

        training::RunConfig run = config.finetune;
        run.objective = config.task;
        run.seed = seed;
        if (run.early_stop_tolerance <= 0) run.early_stop_tolerance = 3;
        training::FinetuneResult result =
            training::finetune(run, config.encoder, data, init_ptr, prepared.vocab.n_features(),
                               prepared.vocab.n_cat_ids);

        eval::EvalReport report;
        report.task = config.task;
        report.method = "finetune_" + config.objective;
        report.auroc_point = result.test_auroc;
        report.auprc_point = result.test_auprc;
        report.auroc_mean = result.test_auroc;
        report.auprc_mean = result.test_auprc;
        report.seeds = {seed};
        report.std_source = "seeds";
        json echo;
        echo["val_auroc"] = result.val_auroc;
        echo["best_epoch"] = result.provenance.best_epoch;
        echo["mode"] = events::to_string(config.input_mode);
        echo["stamp"] = stamp(config);
        report.config_echo = echo.dump();
        eval::write_report(report, report_path.string());

        std::ofstream preds(wd / ("predictions_" + config.objective + "_" + config.task + "_seed" +
                                  std::to_string(seed) + ".csv"));
        preds << "score,label\n";
        for (size_t i = 0; i < result.test_scores.size(); ++i)
            preds << result.test_scores[i] << "," << result.test_labels[i] << "\n";

        json ckpt_config;
        ckpt_config["encoder"] = encoder_to_json(config.encoder);
        ckpt_config["objective"] = "finetune_" + config.task;
        ckpt_config["stamp"] = stamp(config);
        training::save_checkpoint(finetune_checkpoint_dir(config, seed), result.params, ckpt_config.dump(2),
                                  feat::vocabulary_to_json(prepared.vocab), result.provenance);
        std::cout << "finetune seed " << seed << ": test AUROC " << result.test_auroc << ", AUPRC "
                  << result.test_auprc << "\n";
    }
    return 0;
}

namespace {

int run_embedding_eval(const Config& config, bool force, bool knn) {
    config.validate();
    WorkdirLock lock(config.workdir);
    const fs::path wd(config.workdir);
    fs::create_directories(wd / "reports");
    const std::string method = knn ? "knn" : "probe";
    const fs::path report_path = wd / "reports" /
                                 (method + "_" + config.objective + "_" + config.task + "_seed" +
                                  std::to_string(config.seed) + ".json");
    guard_overwrite(report_path, config, force);

    PreparedData prepared = load_prepared(config);
    auto outcomes = events::outcomes_by_patient(events::read_outcomes_file(outcomes_file(config)));
    model::ParamStore params = load_or_init_encoder(config, prepared.vocab);

    auto table_for = [&](const std::vector<std::string>& ids, const std::string& name) {
        objectives::PairDataset pairs = labeled_pairs(config, prepared.dataset, prepared.vocab, ids, outcomes);
        return embed_pairs(config, params, prepared.dataset, prepared.vocab, pairs, name);
    };
    eval::EmbeddingTable train = table_for(prepared.split.train_ids, "train");
    eval::EmbeddingTable val = table_for(prepared.split.val_ids, "val");
    eval::EmbeddingTable test = table_for(prepared.split.test_ids, "test");

    eval::EvalReport report;
    if (knn) {
        eval::KnnSweep sweep;
        report = eval::knn_eval(train, val, test, config.task, config.input_mode, sweep, config.seed);
    } else {
        report = eval::linear_probe(train, val, test, config.task, config.input_mode, config.l2_grid, config.seed);
    }
    report.method += "_" + config.objective;
    report.seeds = {config.seed};
    json echo = json::parse(report.config_echo);
    echo["stamp"] = stamp(config);
    report.config_echo = echo.dump();
    eval::write_report(report, report_path.string());
    std::cout << method << " " << config.objective << "/" << config.task << ": test AUROC " << report.auroc_point
              << " (bootstrap " << report.auroc_mean << " +/- " << report.auroc_std << ")\n";

    if (config.export_embeddings && !knn) {
        model::ParamStore tensors;
        auto pack = [&](const eval::EmbeddingTable& table, const std::string& prefix) {
            if (table.rows.empty()) return;
            const Eigen::Index d = table.rows.front().pre.size();
            nn::Matrix pre(static_cast<Eigen::Index>(table.rows.size()), d);
            nn::Matrix post(static_cast<Eigen::Index>(table.rows.size()), d);
            for (size_t i = 0; i < table.rows.size(); ++i) {
                pre.row(static_cast<Eigen::Index>(i)) = table.rows[i].pre.transpose();
                post.row(static_cast<Eigen::Index>(i)) = table.rows[i].post.transpose();
            }
            tensors.add(prefix + ".pre", pre);
            tensors.add(prefix + ".post", post);
        };
        pack(train, "train");
        pack(val, "val");
        pack(test, "test");
        training::Provenance prov;
        prov.objective = "embeddings_" + config.objective;
        prov.seed = config.seed;
        const std::string emb_dir = (wd / ("embeddings_" + config.objective + "_seed" +
                                           std::to_string(config.seed))).string();
        json emb_cfg;
        emb_cfg["encoder"] = encoder_to_json(config.encoder);
        emb_cfg["stamp"] = stamp(config);
        training::save_checkpoint(emb_dir, tensors, emb_cfg.dump(2), feat::vocabulary_to_json(prepared.vocab), prov);
        std::ofstream idx(fs::path(emb_dir) / "index.csv");
        idx << "split,patient_id,event_time\n";
        for (const auto* table : {&train, &val, &test})
            for (const auto& row : table->rows)
                idx << table->split << "," << row.patient_id << "," << row.event_time << "\n";
    }
    return 0;
}

}  // namespace

int run_probe(const Config& config, bool force) { return run_embedding_eval(config, force, false); }
int run_knn(const Config& config, bool force) { return run_embedding_eval(config, force, true); }

int run_cluster(const Config& config, bool force) {
    config.validate();
    WorkdirLock lock(config.workdir);
    const fs::path wd(config.workdir);
    const fs::path report_path = wd / ("cluster_" + config.objective + "_seed" + std::to_string(config.seed) +
                                       ".json");
    guard_overwrite(report_path, config, force);

    PreparedData prepared = load_prepared(config);
    auto outcomes = events::outcomes_by_patient(events::read_outcomes_file(outcomes_file(config)));
    model::ParamStore params = load_or_init_encoder(config, prepared.vocab);

    objectives::PairDataset pairs =
        labeled_pairs(config, prepared.dataset, prepared.vocab, prepared.split.test_ids, outcomes);
    eval::EmbeddingTable table = embed_pairs(config, params, prepared.dataset, prepared.vocab, pairs, "test");
    if (table.rows.size() < 4) throw std::runtime_error("cluster: too few labeled test events");

    const Eigen::Index d = table.rows.front().pre.size();
    Eigen::MatrixXd X(static_cast<Eigen::Index>(table.rows.size()), 2 * d);
    for (size_t i = 0; i < table.rows.size(); ++i)
        X.row(static_cast<Eigen::Index>(i)) << table.rows[i].pre.transpose(), table.rows[i].post.transpose();

    int chosen_k = config.cluster_k;
    std::vector<int> k_grid;
    std::vector<double> inertias;
    if (chosen_k <= 0) {
        for (int k = config.cluster_k_min; k <= std::min<int>(config.cluster_k_max, static_cast<int>(X.rows())); ++k) {
            k_grid.push_back(k);
            inertias.push_back(analysis::kmeans(X, k, config.seed, config.cluster_n_init).inertia);
        }
        chosen_k = analysis::elbow_select(k_grid, inertias);
    }
    analysis::ClusterAssignment assignment = analysis::kmeans(X, chosen_k, config.seed, config.cluster_n_init);

    std::vector<analysis::EventOutcome> event_outcomes(table.rows.size());
    for (size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        auto lbl = row.labels.find(config.task);
        if (lbl != row.labels.end()) event_outcomes[i].label = lbl->second;
        auto it = outcomes.find(row.patient_id);
        if (it != outcomes.end()) {
            for (const auto& rec : it->second) {
                if (rec.task == config.task && rec.time > row.event_time) {
                    event_outcomes[i].time_to_event = rec.time - row.event_time;
                    break;
                }
            }
        }
    }

    analysis::StratificationReport strat = analysis::stratification_report(assignment, event_outcomes, X);

    json j = json::parse(analysis::stratification_to_json(strat));
    j["k"] = chosen_k;
    j["k_grid"] = k_grid;
    j["inertias"] = inertias;
    j["stamp"] = stamp(config);
    std::ofstream out(report_path);
    out << j.dump(2) << "\n";

    // Survival step-plot per cluster (events only; label-0 rows censored at
    // their last observed outcome horizon).
    std::vector<analysis::SurvivalCurve> curves;
    std::vector<std::string> names;
    double t_max = 1.0;
    for (int c = 0; c < assignment.k; ++c) {
        std::vector<double> times;
        std::vector<int> observed;
        for (size_t i = 0; i < event_outcomes.size(); ++i) {
            if (assignment.labels[i] != c || !event_outcomes[i].time_to_event) continue;
            times.push_back(*event_outcomes[i].time_to_event);
            observed.push_back(event_outcomes[i].label == 1 ? 1 : 0);
            t_max = std::max(t_max, times.back());
        }
        if (times.size() < 2) continue;
        curves.push_back(analysis::km_curve(times, observed));
        names.push_back("cluster " + std::to_string(c));
    }
    if (!curves.empty()) {
        std::ofstream svg(wd / ("cluster_" + config.objective + "_survival.svg"));
        svg << analysis::survival_curves_svg(curves, names, t_max);
    }
    std::cout << "cluster: K=" << chosen_k << ", delta prevalence " << strat.delta_prevalence << "\n";
    return 0;
}

ReportTable aggregate_reports(const std::vector<eval::EvalReport>& reports,
                              const std::vector<std::string>& method_names) {
    std::vector<std::string> tasks;
    for (const auto& r : reports)
        if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
    std::sort(tasks.begin(), tasks.end());

    ReportTable table;
    table.tasks = tasks;
    table.methods = method_names;
    for (const auto& method : method_names) {
        std::vector<std::string> row;
        for (const auto& task : tasks) {
            std::vector<double> points;
            for (const auto& r : reports)
                if (r.method == method && r.task == task) points.push_back(r.auroc_point);
            if (points.empty()) {
                row.push_back("-");
                continue;
            }
            const double mean = std::accumulate(points.begin(), points.end(), 0.0) / points.size();
            double sd = 0.0;
            if (points.size() > 1) {
                for (double p : points) sd += (p - mean) * (p - mean);
                sd = std::sqrt(sd / (points.size() - 1.0));
            }
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", 100.0 * mean, 100.0 * sd);
            row.push_back(buf);
        }
        table.cells.push_back(std::move(row));
    }
    return table;
}

std::string ReportTable::to_markdown() const {
    std::ostringstream out;
    out << "| method |";
    for (const auto& t : tasks) out << " " << t << " |";
    out << "\n|---|";
    for (size_t i = 0; i < tasks.size(); ++i) out << "---|";
    out << "\n";
    for (size_t m = 0; m < methods.size(); ++m) {
        out << "| " << methods[m] << " |";
        for (const auto& cell : cells[m]) out << " " << cell << " |";
        out << "\n";
    }
    return out.str();
}

std::string ReportTable::to_csv() const {
    std::ostringstream out;
    out << "method";
    for (const auto& t : tasks) out << "," << t;
    out << "\n";
    for (size_t m = 0; m < methods.size(); ++m) {
        out << methods[m];
        for (const auto& cell : cells[m]) out << ",\"" << cell << "\"";
        out << "\n";
    }
    return out.str();
}

int run_report(const Config& config, bool force) {
    config.validate();
    WorkdirLock lock(config.workdir);
    const fs::path wd(config.workdir);
    const fs::path out_md = wd / "report.md";
    guard_overwrite(out_md, config, force);

    std::vector<eval::EvalReport> reports;
    std::vector<std::string> methods;
    const fs::path reports_dir = wd / "reports";
    if (fs::exists(reports_dir)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(reports_dir))
            if (entry.path().extension() == ".json") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            reports.push_back(eval::read_report(f.string()));
            if (std::find(methods.begin(), methods.end(), reports.back().method) == methods.end())
                methods.push_back(reports.back().method);
        }
    }
    if (reports.empty()) throw std::runtime_error("report: no eval reports found under " + reports_dir.string());

    ReportTable table = aggregate_reports(reports, methods);
    std::ofstream md(out_md);
    md << "# AUROC (mean ± std over seeds)\n\n" << table.to_markdown();
    std::ofstream csv(wd / "report.csv");
    csv << table.to_csv();
    write_stamped_sidecar(out_md, config);
    std::cout << table.to_markdown();
    return 0;
}

int run_stage(const std::string& subcommand, const Config& config, bool force) {
    if (subcommand == "generate") return run_generate(config, force);
    if (subcommand == "preprocess") return run_preprocess(config, force);
    if (subcommand == "pretrain") return run_pretrain(config, force);
    if (subcommand == "finetune") return run_finetune(config, force);
    if (subcommand == "probe") return run_probe(config, force);
    if (subcommand == "knn") return run_knn(config, force);
    if (subcommand == "cluster") return run_cluster(config, force);
    if (subcommand == "report") return run_report(config, force);
    throw std::invalid_argument("unknown subcommand: " + subcommand);
}

}  // namespace ebcl::pipeline
