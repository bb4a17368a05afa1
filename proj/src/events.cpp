#include "ebcl/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ebcl::events {

using nlohmann::json;

const char* to_string(RecordKind k) {
    switch (k) {
        case RecordKind::Obs: return "obs";
        case RecordKind::Admission: return "admission";
        case RecordKind::Discharge: return "discharge";
        case RecordKind::Outpatient: return "outpatient";
        case RecordKind::VentStart: return "vent_start";
    }
    return "obs";
}

RecordKind record_kind_from_string(const std::string& s) {
    if (s == "obs") return RecordKind::Obs;
    if (s == "admission") return RecordKind::Admission;
    if (s == "discharge") return RecordKind::Discharge;
    if (s == "outpatient") return RecordKind::Outpatient;
    if (s == "vent_start") return RecordKind::VentStart;
    throw std::invalid_argument("unknown record kind: " + s);
}

const char* to_string(EventKind k) {
    switch (k) {
        case EventKind::Admission: return "admission";
        case EventKind::Discharge: return "discharge";
        case EventKind::Hypotension: return "hypotension";
        case EventKind::VentilationStart: return "ventilation_start";
        case EventKind::OutpatientVisit: return "outpatient_visit";
        case EventKind::Other: return "other";
    }
    return "other";
}

const char* to_string(InputMode m) {
    switch (m) {
        case InputMode::Both: return "both";
        case InputMode::PreOnly: return "pre_only";
        case InputMode::PostOnly: return "post_only";
    }
    return "both";
}

InputMode input_mode_from_string(const std::string& s) {
    if (s == "both") return InputMode::Both;
    if (s == "pre_only") return InputMode::PreOnly;
    if (s == "post_only") return InputMode::PostOnly;
    throw std::invalid_argument("unknown input mode: " + s);
}

int32_t Dataset::intern_feature(const std::string& name) {
    auto it = feature_index_.find(name);
    if (it != feature_index_.end()) return it->second;
    int32_t id = static_cast<int32_t>(feature_names_.size());
    feature_names_.push_back(name);
    feature_index_.emplace(name, id);
    return id;
}

int32_t Dataset::intern_category(const std::string& value) {
    auto it = category_index_.find(value);
    if (it != category_index_.end()) return it->second;
    int32_t id = static_cast<int32_t>(category_names_.size());
    category_names_.push_back(value);
    category_index_.emplace(value, id);
    return id;
}

int32_t Dataset::find_feature(const std::string& name) const {
    auto it = feature_index_.find(name);
    return it == feature_index_.end() ? -1 : it->second;
}

size_t Dataset::total_observations() const {
    size_t n = 0;
    for (const auto& p : patients) n += p.obs.size();
    return n;
}

namespace {

// Encounter records without an explicit feature are folded into the
// trajectory under this pseudo-feature so index events keep a position.
constexpr const char* kEncounterFeature = "__encounter__";

struct RawRecord {
    std::string patient_id;
    Observation obs;
    size_t input_order;
};

}  // namespace

Dataset ingest_jsonl(std::istream& in) {
    Dataset ds;
    std::unordered_map<std::string, std::vector<RawRecord>> by_patient;
    std::vector<std::string> patient_order;

    std::string line;
    size_t line_no = 0;
    size_t order = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("parse error at line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            RawRecord raw;
            raw.patient_id = rec.at("patient_id").get<std::string>();
            raw.obs.time = rec.at("time").get<double>();
            raw.obs.kind = rec.contains("kind") ? record_kind_from_string(rec.at("kind").get<std::string>())
                                                : RecordKind::Obs;
            std::string feature =
                rec.contains("feature") ? rec.at("feature").get<std::string>() : std::string(kEncounterFeature);
            raw.obs.feature_id = ds.intern_feature(feature);
            if (rec.contains("value") && rec.at("value").is_number()) {
                raw.obs.is_categorical = false;
                raw.obs.cont_value = rec.at("value").get<double>();
                if (!std::isfinite(raw.obs.cont_value))
                    throw std::runtime_error("non-finite continuous value");
            } else {
                raw.obs.is_categorical = true;
                std::string v = rec.contains("value") ? rec.at("value").get<std::string>()
                                                      : std::string(to_string(raw.obs.kind));
                raw.obs.cat_value = ds.intern_category(v);
            }
            raw.input_order = order++;
            auto [it, inserted] = by_patient.try_emplace(raw.patient_id);
            if (inserted) patient_order.push_back(raw.patient_id);
            it->second.push_back(std::move(raw));
        } catch (const json::exception& e) {
            throw std::runtime_error("parse error at line " + std::to_string(line_no) + ": " + e.what());
        }
    }

    for (const auto& pid : patient_order) {
        auto& recs = by_patient[pid];
        std::stable_sort(recs.begin(), recs.end(),
                         [](const RawRecord& a, const RawRecord& b) { return a.obs.time < b.obs.time; });
        PatientTrajectory traj;
        traj.patient_id = pid;
        traj.obs.reserve(recs.size());
        for (auto& r : recs) traj.obs.push_back(r.obs);
        ds.patients.push_back(std::move(traj));
    }
    return ds;
}

Dataset ingest_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open event-stream file: " + path);
    return ingest_jsonl(in);
}

SplitResult split_by_patient(const Dataset& dataset, const SplitSpec& spec) {
    if (dataset.patients.empty()) throw std::invalid_argument("split_by_patient: empty dataset");
    if (spec.train <= 0 || spec.val <= 0 || spec.test <= 0)
        throw std::invalid_argument("split_by_patient: fractions must be positive");
    double total = spec.train + spec.val + spec.test;
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("split_by_patient: fractions must sum to 1");

    std::vector<std::string> ids;
    ids.reserve(dataset.patients.size());
    for (const auto& p : dataset.patients) ids.push_back(p.patient_id);
    std::sort(ids.begin(), ids.end());
    if (ids.size() < 3) throw std::invalid_argument("split_by_patient: fewer patients than splits");

    std::mt19937_64 rng(spec.seed);
    std::shuffle(ids.begin(), ids.end(), rng);

    size_t n = ids.size();
    size_t n_train = static_cast<size_t>(std::floor(spec.train * static_cast<double>(n)));
    size_t n_val = static_cast<size_t>(std::floor(spec.val * static_cast<double>(n)));
    n_train = std::max<size_t>(1, std::min(n_train, n - 2));
    n_val = std::max<size_t>(1, std::min(n_val, n - n_train - 1));

    SplitResult out;
    out.train_ids.assign(ids.begin(), ids.begin() + static_cast<ptrdiff_t>(n_train));
    out.val_ids.assign(ids.begin() + static_cast<ptrdiff_t>(n_train),
                       ids.begin() + static_cast<ptrdiff_t>(n_train + n_val));
    out.test_ids.assign(ids.begin() + static_cast<ptrdiff_t>(n_train + n_val), ids.end());
    return out;
}

Dataset subset(const Dataset& dataset, const std::vector<std::string>& patient_ids) {
    Dataset out;
    // Re-intern to keep tables identical; ids are stable because interning
    // replays the same insertion order as the source dataset.
    for (const auto& name : dataset.feature_names()) out.intern_feature(name);
    for (const auto& name : dataset.category_names()) out.intern_category(name);
    std::unordered_map<std::string, const PatientTrajectory*> index;
    for (const auto& p : dataset.patients) index.emplace(p.patient_id, &p);
    for (const auto& id : patient_ids) {
        auto it = index.find(id);
        if (it != index.end()) out.patients.push_back(*it->second);
    }
    return out;
}

void validate_detector(const Dataset& dataset, const DetectorConfig& config) {
    for (EventKind k : config.kinds) {
        if (k == EventKind::Hypotension && dataset.find_feature(config.map_feature) < 0)
            throw std::invalid_argument("detector configuration error: feature '" + config.map_feature +
                                        "' not present in dataset");
    }
}

std::vector<IndexEvent> detect_events(const Dataset& dataset, const PatientTrajectory& traj,
                                      const DetectorConfig& config) {
    std::vector<IndexEvent> out;
    bool want_admission = false, want_discharge = false, want_hypo = false, want_vent = false, want_outpatient = false;
    for (EventKind k : config.kinds) {
        switch (k) {
            case EventKind::Admission: want_admission = true; break;
            case EventKind::Discharge: want_discharge = true; break;
            case EventKind::Hypotension: want_hypo = true; break;
            case EventKind::VentilationStart: want_vent = true; break;
            case EventKind::OutpatientVisit: want_outpatient = true; break;
            case EventKind::Other: break;
        }
    }
    int32_t map_id = dataset.find_feature(config.map_feature);

    double prev_map = std::nan("");
    for (size_t i = 0; i < traj.obs.size(); ++i) {
        const Observation& o = traj.obs[i];
        auto push = [&](EventKind kind) {
            out.push_back(IndexEvent{traj.patient_id, static_cast<int>(i), o.time, kind});
        };
        if (want_admission && o.kind == RecordKind::Admission) push(EventKind::Admission);
        if (want_discharge && o.kind == RecordKind::Discharge) push(EventKind::Discharge);
        if (want_outpatient && o.kind == RecordKind::Outpatient) push(EventKind::OutpatientVisit);
        if (want_vent && o.kind == RecordKind::VentStart) push(EventKind::VentilationStart);
        if (want_hypo && map_id >= 0 && o.feature_id == map_id && !o.is_categorical) {
            // Fires on a strict crossing: previous MAP over the threshold,
            // current below it. Exactly-at-threshold neither arms nor fires.
            if (!std::isnan(prev_map) && prev_map > config.hypotension_threshold &&
                o.cont_value < config.hypotension_threshold)
                push(EventKind::Hypotension);
            prev_map = o.cont_value;
        }
    }
    return out;
}

std::optional<WindowPair> extract_window_pair(const PatientTrajectory& traj, const IndexEvent& event,
                                              int tau, int min_len, int censor_pre, int censor_post) {
    if (min_len < 1 || tau < min_len) throw std::invalid_argument("extract_window_pair: need tau >= min_len >= 1");
    if (censor_pre < 0 || censor_post < 0) throw std::invalid_argument("extract_window_pair: censor counts >= 0");
    const int n = static_cast<int>(traj.obs.size());
    const int j = event.position;
    if (j < 0 || j >= n) throw std::invalid_argument("extract_window_pair: event position out of range");

    // Positional windows: pre = j-tau..j-1, post = j..j+tau-1, after dropping
    // the censored counts nearest the event on each side.
    const int pre_end = j - censor_pre;            // exclusive
    const int pre_begin = std::max(0, pre_end - tau);
    const int post_begin = j + censor_post;
    const int post_end = std::min(n, post_begin + tau);

    if (pre_end - pre_begin < min_len) return std::nullopt;
    if (post_end - post_begin < min_len) return std::nullopt;

    WindowPair pair;
    pair.event = event;
    pair.pre.assign(traj.obs.begin() + pre_begin, traj.obs.begin() + pre_end);
    pair.post.assign(traj.obs.begin() + post_begin, traj.obs.begin() + post_end);
    return pair;
}

std::optional<WindowPair> attach_label(const WindowPair& pair, std::span<const OutcomeRecord> patient_outcomes,
                                       const std::string& task, const LabelRule& rule) {
    auto mode_it = rule.task_modes.find(task);
    if (mode_it == rule.task_modes.end())
        throw std::invalid_argument("attach_label: unknown task '" + task + "'");
    const InputMode mode = mode_it->second;

    const double input_end = (mode == InputMode::PreOnly) ? pair.pre.back().time : pair.post.back().time;
    const double select_after = (mode == InputMode::PreOnly) ? pair.pre.back().time : pair.event.time;

    const OutcomeRecord* chosen = nullptr;
    for (const auto& rec : patient_outcomes) {
        if (rec.task != task) continue;
        if (rec.time <= select_after) continue;
        if (!chosen || rec.time < chosen->time) chosen = &rec;
    }
    if (!chosen) return std::nullopt;
    if (chosen->time < input_end + rule.min_gap_days) return std::nullopt;

    WindowPair labeled = pair;
    labeled.labels[task] = chosen->value;
    return labeled;
}

void write_split_manifest(const SplitResult& split, const std::string& path) {
    json j;
    j["train"] = split.train_ids;
    j["val"] = split.val_ids;
    j["test"] = split.test_ids;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write split manifest: " + path);
    out << j.dump(2) << "\n";
}

SplitResult read_split_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read split manifest: " + path);
    json j = json::parse(in);
    SplitResult out;
    out.train_ids = j.at("train").get<std::vector<std::string>>();
    out.val_ids = j.at("val").get<std::vector<std::string>>();
    out.test_ids = j.at("test").get<std::vector<std::string>>();
    return out;
}

std::vector<OutcomeRecord> read_outcomes_jsonl(std::istream& in) {
    std::vector<OutcomeRecord> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json rec = json::parse(line);
            OutcomeRecord r;
            r.patient_id = rec.at("patient_id").get<std::string>();
            r.task = rec.at("task").get<std::string>();
            r.time = rec.at("time").get<double>();
            r.value = rec.at("value").get<int>();
            if (r.value != 0 && r.value != 1)
                throw std::runtime_error("outcome value must be 0 or 1");
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw std::runtime_error("outcome parse error at line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<OutcomeRecord> read_outcomes_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open outcome file: " + path);
    return read_outcomes_jsonl(in);
}

std::map<std::string, std::vector<OutcomeRecord>> outcomes_by_patient(std::vector<OutcomeRecord> records) {
    std::map<std::string, std::vector<OutcomeRecord>> out;
    for (auto& r : records) out[r.patient_id].push_back(std::move(r));
    for (auto& [pid, recs] : out)
        std::stable_sort(recs.begin(), recs.end(),
                         [](const OutcomeRecord& a, const OutcomeRecord& b) { return a.time < b.time; });
    return out;
}

}  // namespace ebcl::events
