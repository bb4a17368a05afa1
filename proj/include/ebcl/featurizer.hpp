#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebcl/events.hpp"

namespace ebcl::feat {

/// Feature/value maps built on the training split. Features below min_count
/// are dropped; rare categorical values collapse to a per-feature UNKNOWN id.
/// Serializes to JSON with explicit id assignments.
struct Vocabulary {
    struct Feature {
        std::string name;
        bool is_cont = true;
        int id = 0;  // dense model feature id, starting at 0
        int64_t count = 0;
        double mean = 0.0;
        double std = 1.0;                      // degenerate features mapped to 1
        std::map<std::string, int> value_ids;  // categorical value -> global cat id
        int unknown_id = -1;                   // reserved per categorical feature
    };

    std::vector<Feature> features;  // ordered by id
    std::map<std::string, int> feature_ids;
    int n_cat_ids = 1;  // global categorical id space; id 0 reserved for PAD
    double time_std = 1.0;

    int n_features() const { return static_cast<int>(features.size()); }
    const Feature* find(const std::string& name) const;
};

/// Default rare-feature threshold: 1000 on a paper-scale corpus, scaled down
/// by corpus size so desk-scale datasets keep a usable vocabulary.
int default_min_count(size_t n_observations);

Vocabulary build_vocabulary(const events::Dataset& train, int min_count);

/// Std of relative observation times (t - event_time) over all training
/// window tokens; degenerate values map to 1.
double compute_time_std(std::span<const events::WindowPair> train_pairs);

/// One encoded window: padded, masked arrays of length max_len.
struct TokenRow {
    std::vector<double> times;       // (t - anchor) / time_std
    std::vector<int32_t> feature_ids;
    std::vector<double> cont_values;  // z-normalized; 0 at categorical/pad positions
    std::vector<int32_t> cat_value_ids;
    std::vector<uint8_t> is_cont;
    std::vector<uint8_t> mask;  // true = real token
    int n_valid = 0;

    int max_len() const { return static_cast<int>(times.size()); }
};

struct TokenBatch {
    std::vector<TokenRow> rows;
    int size() const { return static_cast<int>(rows.size()); }
};

/// Raw triple with a precomputed relative time; the entry point used by
/// objectives that control their own time anchoring.
struct RelativeObservation {
    double rel_time = 0.0;
    const events::Observation* obs = nullptr;
};

/// Encode a window against the vocabulary. Times are (t - event_time) and
/// then scaled by 1/time_std; values z-normalized / label-encoded; dropped
/// features removed; truncation keeps the max_len observations nearest the
/// anchor. Returns nullopt when fewer than min_len tokens survive.
std::optional<TokenRow> encode_window(std::span<const events::Observation> window, double event_time,
                                      const events::Dataset& dataset, const Vocabulary& vocab,
                                      int max_len = 512, int min_len = 16);

std::optional<TokenRow> encode_relative(std::span<const RelativeObservation> items,
                                        const events::Dataset& dataset, const Vocabulary& vocab,
                                        int max_len = 512, int min_len = 16);

/// Aggregation windows in days; <= 0 means unbounded.
struct TabularSpec {
    std::vector<double> windows = {1.0, 7.0, 30.0, 365.0, -1.0};
    int top_k = 128;
};

/// Fixed-size window/aggregate summary vector for the external gradient-
/// boosted learner: (top_k + 1) features x {mean, count, min, max} x windows,
/// window-major. Missing cells carry NaN; counts are always present.
std::vector<double> aggregate_tabular(const events::PatientTrajectory& traj, double cutoff_time,
                                      const events::Dataset& dataset, const Vocabulary& vocab,
                                      const TabularSpec& spec = {});

size_t tabular_length(const TabularSpec& spec);

std::string vocabulary_to_json(const Vocabulary& vocab);
Vocabulary vocabulary_from_json(const std::string& text);
void write_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary read_vocabulary(const std::string& path);

}  // namespace ebcl::feat
