#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ebcl::events {

/// Record kinds carried by the event-stream file. Non-"obs" kinds mark
/// encounter records which double as index-event anchors.
enum class RecordKind : uint8_t { Obs, Admission, Discharge, Outpatient, VentStart };

const char* to_string(RecordKind k);
RecordKind record_kind_from_string(const std::string& s);

/// One (time, feature, value) triple. Times are fractional days from a
/// per-dataset epoch. Feature and categorical-value codes index the string
/// tables owned by the Dataset.
struct Observation {
    double time = 0.0;
    int32_t feature_id = 0;
    bool is_categorical = false;
    double cont_value = 0.0;  // finite iff !is_categorical
    int32_t cat_value = 0;    // >= 0 iff is_categorical
    RecordKind kind = RecordKind::Obs;
};

struct PatientTrajectory {
    std::string patient_id;
    std::vector<Observation> obs;  // sorted by time, stable on ties
};

/// Interned event-stream dataset: trajectories plus the string tables that
/// give meaning to feature and categorical-value codes.
class Dataset {
public:
    std::vector<PatientTrajectory> patients;

    int32_t intern_feature(const std::string& name);
    int32_t intern_category(const std::string& value);
    /// -1 when absent.
    int32_t find_feature(const std::string& name) const;

    const std::string& feature_name(int32_t id) const { return feature_names_.at(static_cast<size_t>(id)); }
    const std::string& category_name(int32_t id) const { return category_names_.at(static_cast<size_t>(id)); }
    const std::vector<std::string>& feature_names() const { return feature_names_; }
    const std::vector<std::string>& category_names() const { return category_names_; }

    size_t total_observations() const;

private:
    std::vector<std::string> feature_names_;
    std::vector<std::string> category_names_;
    std::unordered_map<std::string, int32_t> feature_index_;
    std::unordered_map<std::string, int32_t> category_index_;
};

enum class EventKind : uint8_t { Admission, Discharge, Hypotension, VentilationStart, OutpatientVisit, Other };

const char* to_string(EventKind k);

/// A clinical anchor: position j into a trajectory with trajectory[j].time == time.
struct IndexEvent {
    std::string patient_id;
    int position = 0;
    double time = 0.0;
    EventKind kind = EventKind::Admission;
};

/// The (pre, post) windows L, R around an index event.
struct WindowPair {
    std::vector<Observation> pre;
    std::vector<Observation> post;
    IndexEvent event;
    std::map<std::string, int> labels;  // task -> {0,1}
};

struct SplitSpec {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    uint64_t seed = 0;
};

struct SplitResult {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
};

struct OutcomeRecord {
    std::string patient_id;
    std::string task;
    double time = 0.0;
    int value = 0;
};

/// Which windows feed a downstream task; decides the leakage boundary.
enum class InputMode : uint8_t { Both, PreOnly, PostOnly };

const char* to_string(InputMode m);
InputMode input_mode_from_string(const std::string& s);

struct LabelRule {
    std::map<std::string, InputMode> task_modes;
    double min_gap_days = 1.0;
};

struct DetectorConfig {
    std::vector<EventKind> kinds = {EventKind::Admission};
    std::string map_feature = "MAP";
    double hypotension_threshold = 60.0;
};

/// Parse a JSON-Lines event stream. Unsorted input is sorted (stable);
/// malformed lines raise with the 1-based line number.
Dataset ingest_jsonl(std::istream& in);
Dataset ingest_file(const std::string& path);

/// Deterministic patient-level partition; every event of a patient lands in
/// exactly one split.
SplitResult split_by_patient(const Dataset& dataset, const SplitSpec& spec);

/// Restrict a dataset to the given patient ids (string tables shared by copy).
Dataset subset(const Dataset& dataset, const std::vector<std::string>& patient_ids);

/// Throws if the detector references a feature absent from the dataset while
/// a feature-driven event kind is requested.
void validate_detector(const Dataset& dataset, const DetectorConfig& config);

std::vector<IndexEvent> detect_events(const Dataset& dataset, const PatientTrajectory& traj,
                                      const DetectorConfig& config);

/// Window extraction with censoring. Returns nullopt (Rejected) when either
/// side ends up shorter than min_len.
std::optional<WindowPair> extract_window_pair(const PatientTrajectory& traj, const IndexEvent& event,
                                              int tau, int min_len, int censor_pre = 0, int censor_post = 0);

/// Attach the label for `task` from the patient's outcome records, enforcing
/// the >= min_gap_days leakage rule. Returns nullopt (Excluded) when the
/// label-defining outcome is too close to the input window, or when the
/// patient has no outcome after the event.
std::optional<WindowPair> attach_label(const WindowPair& pair, std::span<const OutcomeRecord> patient_outcomes,
                                       const std::string& task, const LabelRule& rule);

void write_split_manifest(const SplitResult& split, const std::string& path);
SplitResult read_split_manifest(const std::string& path);

std::vector<OutcomeRecord> read_outcomes_jsonl(std::istream& in);
std::vector<OutcomeRecord> read_outcomes_file(const std::string& path);

/// patient_id -> outcome records sorted by time.
std::map<std::string, std::vector<OutcomeRecord>> outcomes_by_patient(std::vector<OutcomeRecord> records);

}  // namespace ebcl::events
