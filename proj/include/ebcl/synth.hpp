#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ebcl/events.hpp"

namespace ebcl::synth {

/// Knobs for the event-anchored synthetic cohort. Each patient carries
/// constant static features and oscillating features whose post-event trend
/// slope is shifted by a latent severity drawn at each admission.
struct GeneratorConfig {
    int n_patients = 200;
    int n_static_features = 4;
    int n_static_values = 16;  // cardinality of the static value space
    int n_oscillating_features = 4;
    int events_min = 1;
    int events_max = 2;
    double obs_rate = 8.0;            // observations per day per feature stream
    double span_days = 40.0;          // trajectory length
    double trend_shift_scale = 1.0;   // std of the per-event severity
    double post_trend_decay_days = 0.0;  // 0 = pure slope shift; >0 concentrates the shift near the event
    double baseline_slope_std = 0.05;
    double osc_amplitude = 1.0;
    double period_days_min = 2.0;
    double period_days_max = 10.0;
    double noise_std = 0.1;
    double outcome_slope = 3.0;      // a in sigmoid(a*s + b)
    double outcome_intercept = 0.0;  // b
    double outcome_delay_mean_days = 60.0;
    int n_outpatient_visits = 2;
    uint64_t seed = 0;
};

struct GroundTruthRow {
    std::string patient_id;
    double event_time = 0.0;
    double severity = 0.0;
    double pre_slope = 0.0;
    double post_slope = 0.0;
};

struct SynthResult {
    events::Dataset dataset;
    std::vector<events::OutcomeRecord> outcomes;
    std::vector<GroundTruthRow> ground_truth;
};

/// Deterministic for a fixed config; per-patient RNG streams derive from
/// seed ^ patient index so generation order is irrelevant.
SynthResult generate(const GeneratorConfig& config);

void write_dataset_jsonl(const events::Dataset& dataset, const std::string& path);
void write_outcomes_jsonl(const std::vector<events::OutcomeRecord>& outcomes, const std::string& path);
void write_ground_truth_jsonl(const std::vector<GroundTruthRow>& rows, const std::string& path);

}  // namespace ebcl::synth
