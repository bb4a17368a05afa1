#include "ebcl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ebcl::synth {

using events::Dataset;
using events::Observation;
using events::OutcomeRecord;
using events::PatientTrajectory;
using events::RecordKind;
using nlohmann::json;

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct OscParams {
    double period;
    double phase;
};

// Cumulative value shift contributed by an event of severity s, delta days
// later. Pure slope shift when decay == 0; otherwise the slope decays as
// exp(-delta/decay) so the trend concentrates near the event.
double trend_shift(double severity, double delta, double decay) {
    if (delta <= 0) return 0.0;
    if (decay <= 0) return severity * delta;
    return severity * decay * (1.0 - std::exp(-delta / decay));
}

double trend_slope_at(double t, double base_slope, const std::vector<double>& event_times,
                      const std::vector<double>& severities, double decay) {
    double slope = base_slope;
    for (size_t e = 0; e < event_times.size(); ++e) {
        if (event_times[e] < t) {
            slope += (decay <= 0) ? severities[e] : severities[e] * std::exp(-(t - event_times[e]) / decay);
        }
    }
    return slope;
}

}  // namespace

SynthResult generate(const GeneratorConfig& cfg) {
    if (cfg.n_patients <= 0 || cfg.n_static_features < 0 || cfg.n_oscillating_features <= 0 ||
        cfg.events_min < 1 || cfg.events_max < cfg.events_min || cfg.obs_rate <= 0 || cfg.span_days <= 0 ||
        cfg.n_static_values < 1)
        throw std::invalid_argument("generate: invalid generator config");

    SynthResult out;
    Dataset& ds = out.dataset;

    std::vector<int32_t> static_ids, osc_ids;
    for (int k = 0; k < cfg.n_static_features; ++k)
        static_ids.push_back(ds.intern_feature("static_" + std::to_string(k)));
    for (int k = 0; k < cfg.n_oscillating_features; ++k)
        osc_ids.push_back(ds.intern_feature("osc_" + std::to_string(k)));
    std::vector<int32_t> static_value_ids;
    for (int v = 0; v < cfg.n_static_values; ++v)
        static_value_ids.push_back(ds.intern_category("v" + std::to_string(v)));
    const int32_t encounter_id = ds.intern_feature("__encounter__");
    const int32_t adm_cat = ds.intern_category("admission");
    const int32_t outp_cat = ds.intern_category("outpatient");

    const int n_streams = cfg.n_static_features + cfg.n_oscillating_features;
    const double two_pi = 2.0 * std::numbers::pi;

    char pid_buf[24];
    for (int p = 0; p < cfg.n_patients; ++p) {
        std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(static_cast<uint64_t>(p) + 1)));
        std::snprintf(pid_buf, sizeof(pid_buf), "p%06d", p);
        const std::string pid(pid_buf);

        std::uniform_int_distribution<int> static_dist(0, cfg.n_static_values - 1);
        std::vector<int> static_vals(static_cast<size_t>(cfg.n_static_features));
        for (auto& v : static_vals) v = static_dist(rng);

        std::normal_distribution<double> slope_dist(0.0, cfg.baseline_slope_std);
        const double base_slope = slope_dist(rng);

        std::vector<OscParams> osc(static_cast<size_t>(cfg.n_oscillating_features));
        std::uniform_real_distribution<double> period_dist(cfg.period_days_min, cfg.period_days_max);
        std::uniform_real_distribution<double> phase_dist(0.0, two_pi);
        for (auto& o : osc) {
            o.period = period_dist(rng);
            o.phase = phase_dist(rng);
        }

        std::uniform_int_distribution<int> n_event_dist(cfg.events_min, cfg.events_max);
        const int n_events = n_event_dist(rng);
        std::uniform_real_distribution<double> event_time_dist(0.25 * cfg.span_days, 0.75 * cfg.span_days);
        std::vector<double> event_times(static_cast<size_t>(n_events));
        for (auto& t : event_times) t = event_time_dist(rng);
        std::sort(event_times.begin(), event_times.end());

        std::normal_distribution<double> sev_dist(0.0, cfg.trend_shift_scale);
        std::vector<double> severities(static_cast<size_t>(n_events));
        for (auto& s : severities) s = sev_dist(rng);

        auto osc_value = [&](int f, double t) {
            const auto& o = osc[static_cast<size_t>(f)];
            double v = cfg.osc_amplitude * std::sin(two_pi * t / o.period + o.phase) + base_slope * t;
            for (size_t e = 0; e < event_times.size(); ++e)
                v += trend_shift(severities[e], t - event_times[e], cfg.post_trend_decay_days);
            return v;
        };

        PatientTrajectory traj;
        traj.patient_id = pid;

        std::exponential_distribution<double> gap_dist(cfg.obs_rate);
        std::uniform_int_distribution<int> stream_dist(0, n_streams - 1);
        std::normal_distribution<double> noise_dist(0.0, cfg.noise_std);
        double t = gap_dist(rng);
        while (t < cfg.span_days) {
            Observation o;
            o.time = t;
            const int stream = stream_dist(rng);
            if (stream < cfg.n_static_features) {
                o.feature_id = static_ids[static_cast<size_t>(stream)];
                o.is_categorical = true;
                o.cat_value = static_value_ids[static_cast<size_t>(static_vals[static_cast<size_t>(stream)])];
            } else {
                const int f = stream - cfg.n_static_features;
                o.feature_id = osc_ids[static_cast<size_t>(f)];
                o.is_categorical = false;
                o.cont_value = osc_value(f, t) + (cfg.noise_std > 0 ? noise_dist(rng) : 0.0);
            }
            traj.obs.push_back(o);
            t += gap_dist(rng);
        }

        for (double te : event_times) {
            Observation o;
            o.time = te;
            o.feature_id = encounter_id;
            o.is_categorical = true;
            o.cat_value = adm_cat;
            o.kind = RecordKind::Admission;
            traj.obs.push_back(o);
        }
        std::uniform_real_distribution<double> visit_dist(0.0, cfg.span_days);
        for (int v = 0; v < cfg.n_outpatient_visits; ++v) {
            Observation o;
            o.time = visit_dist(rng);
            o.feature_id = encounter_id;
            o.is_categorical = true;
            o.cat_value = outp_cat;
            o.kind = RecordKind::Outpatient;
            traj.obs.push_back(o);
        }
        std::stable_sort(traj.obs.begin(), traj.obs.end(),
                         [](const Observation& a, const Observation& b) { return a.time < b.time; });
        ds.patients.push_back(std::move(traj));

        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (size_t e = 0; e < event_times.size(); ++e) {
            const double s = severities[e];
            const double p_out = sigmoid(cfg.outcome_slope * s + cfg.outcome_intercept);
            const int y = unit(rng) < p_out ? 1 : 0;
            std::exponential_distribution<double> delay_dist(1.0 / (cfg.outcome_delay_mean_days * std::exp(-0.5 * s)));
            const double delay = 10.0 + delay_dist(rng);
            out.outcomes.push_back(OutcomeRecord{pid, "mortality", event_times[e] + delay, y});

            GroundTruthRow row;
            row.patient_id = pid;
            row.event_time = event_times[e];
            row.severity = s;
            row.pre_slope = trend_slope_at(event_times[e], base_slope, event_times, severities,
                                           cfg.post_trend_decay_days);
            row.post_slope = row.pre_slope + s;
            out.ground_truth.push_back(row);
        }
    }
    return out;
}

void write_dataset_jsonl(const Dataset& dataset, const std::string& path) {
    std::ofstream outf(path);
    if (!outf) throw std::runtime_error("cannot write dataset file: " + path);
    for (const auto& p : dataset.patients) {
        for (const auto& o : p.obs) {
            json j;
            j["patient_id"] = p.patient_id;
            j["time"] = o.time;
            j["feature"] = dataset.feature_name(o.feature_id);
            if (o.is_categorical)
                j["value"] = dataset.category_name(o.cat_value);
            else
                j["value"] = o.cont_value;
            j["kind"] = events::to_string(o.kind);
            outf << j.dump() << "\n";
        }
    }
}

void write_outcomes_jsonl(const std::vector<OutcomeRecord>& outcomes, const std::string& path) {
    std::ofstream outf(path);
    if (!outf) throw std::runtime_error("cannot write outcome file: " + path);
    for (const auto& r : outcomes) {
        json j;
        j["patient_id"] = r.patient_id;
        j["task"] = r.task;
        j["time"] = r.time;
        j["value"] = r.value;
        outf << j.dump() << "\n";
    }
}

void write_ground_truth_jsonl(const std::vector<GroundTruthRow>& rows, const std::string& path) {
    std::ofstream outf(path);
    if (!outf) throw std::runtime_error("cannot write ground-truth file: " + path);
    for (const auto& r : rows) {
        json j;
        j["patient_id"] = r.patient_id;
        j["event_time"] = r.event_time;
        j["severity"] = r.severity;
        j["pre_slope"] = r.pre_slope;
        j["post_slope"] = r.post_slope;
        outf << j.dump() << "\n";
    }
}

}  // namespace ebcl::synth
