#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>
#include <sstream>

#include "ebcl/events.hpp"

using namespace ebcl::events;

namespace {

Dataset dataset_from_text(const std::string& text) {
    std::istringstream in(text);
    return ingest_jsonl(in);
}

PatientTrajectory map_series(Dataset& ds, const std::vector<double>& values) {
    const int map_id = ds.intern_feature("MAP");
    PatientTrajectory traj;
    traj.patient_id = "p0";
    for (size_t i = 0; i < values.size(); ++i) {
        Observation o;
        o.time = static_cast<double>(i);
        o.feature_id = map_id;
        o.cont_value = values[i];
        traj.obs.push_back(o);
    }
    return traj;
}

// Independent scan: count strict crossings from above threshold to below it.
int brute_force_hypotension_count(const std::vector<double>& values, double threshold) {
    int count = 0;
    for (size_t i = 1; i < values.size(); ++i)
        if (values[i - 1] > threshold && values[i] < threshold) ++count;
    return count;
}

PatientTrajectory simple_trajectory(int n, double dt = 1.0) {
    Dataset ds;
    const int f = ds.intern_feature("f");
    PatientTrajectory traj;
    traj.patient_id = "p";
    for (int i = 0; i < n; ++i) {
        Observation o;
        o.time = dt * static_cast<double>(i);
        o.feature_id = f;
        o.cont_value = static_cast<double>(i);
        traj.obs.push_back(o);
    }
    return traj;
}

}  // namespace

TEST_CASE("ingest sorts shuffled records for one patient") {
    Dataset ds = dataset_from_text(
        R"({"patient_id":"a","time":3.0,"feature":"k","value":4.0,"kind":"obs"}
{"patient_id":"a","time":1.0,"feature":"k","value":2.0,"kind":"obs"}
{"patient_id":"a","time":2.0,"feature":"k","value":3.0,"kind":"obs"}
)");
    REQUIRE(ds.patients.size() == 1);
    REQUIRE(ds.patients[0].obs.size() == 3);
    CHECK(ds.patients[0].obs[0].time == 1.0);
    CHECK(ds.patients[0].obs[1].time == 2.0);
    CHECK(ds.patients[0].obs[2].time == 3.0);
    CHECK(ds.patients[0].obs[0].cont_value == 2.0);
}

TEST_CASE("ingest of an empty file is an empty dataset") {
    Dataset ds = dataset_from_text("");
    CHECK(ds.patients.empty());
    CHECK(ds.total_observations() == 0);
}

TEST_CASE("ingest keeps the potassium-style triple") {
    // time pre-mapped to a day offset upstream, per the file contract
    Dataset ds = dataset_from_text(R"({"patient_id":"i","time":19755.33,"feature":"potassium","value":4.2})"
                                   "\n");
    REQUIRE(ds.patients.size() == 1);
    const Observation& o = ds.patients[0].obs[0];
    CHECK(o.time == doctest::Approx(19755.33));
    CHECK(ds.feature_name(o.feature_id) == "potassium");
    CHECK_FALSE(o.is_categorical);
    CHECK(o.cont_value == doctest::Approx(4.2));
}

TEST_CASE("ingest reports the malformed line number") {
    try {
        dataset_from_text("{\"patient_id\":\"a\",\"time\":1.0,\"feature\":\"k\",\"value\":1}\nnot json\n");
        FAIL("expected parse error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("ingest preserves record counts and stable tie order") {
    Dataset ds = dataset_from_text(
        R"({"patient_id":"a","time":1.0,"feature":"k","value":1.0}
{"patient_id":"a","time":1.0,"feature":"k","value":2.0}
{"patient_id":"b","time":0.5,"feature":"k","value":3.0}
)");
    REQUIRE(ds.patients.size() == 2);
    CHECK(ds.total_observations() == 3);
    CHECK(ds.patients[0].obs[0].cont_value == 1.0);  // input order kept on ties
    CHECK(ds.patients[0].obs[1].cont_value == 2.0);
}

TEST_CASE("split_by_patient: sizes, disjointness, determinism") {
    Dataset ds;
    for (int i = 0; i < 10; ++i) {
        PatientTrajectory t;
        t.patient_id = "p" + std::to_string(i);
        ds.patients.push_back(t);
    }
    SplitSpec spec{0.8, 0.1, 0.1, 7};
    SplitResult s = split_by_patient(ds, spec);
    CHECK(s.train_ids.size() == 8);
    CHECK(s.val_ids.size() == 1);
    CHECK(s.test_ids.size() == 1);

    std::set<std::string> all;
    for (const auto* ids : {&s.train_ids, &s.val_ids, &s.test_ids})
        for (const auto& id : *ids) CHECK(all.insert(id).second);  // pairwise disjoint
    CHECK(all.size() == 10);                                       // union covers the dataset

    SplitResult again = split_by_patient(ds, spec);
    CHECK(s.train_ids == again.train_ids);
    CHECK(s.val_ids == again.val_ids);
    CHECK(s.test_ids == again.test_ids);

    SplitResult other = split_by_patient(ds, SplitSpec{0.8, 0.1, 0.1, 8});
    CHECK(s.train_ids != other.train_ids);
}

TEST_CASE("split_by_patient rejects degenerate inputs") {
    Dataset empty;
    CHECK_THROWS_AS(split_by_patient(empty, SplitSpec{}), std::invalid_argument);
    Dataset two;
    for (int i = 0; i < 2; ++i) {
        PatientTrajectory t;
        t.patient_id = std::to_string(i);
        two.patients.push_back(t);
    }
    CHECK_THROWS_AS(split_by_patient(two, SplitSpec{}), std::invalid_argument);
    Dataset ten;
    for (int i = 0; i < 10; ++i) {
        PatientTrajectory t;
        t.patient_id = std::to_string(i);
        ten.patients.push_back(t);
    }
    CHECK_THROWS_AS(split_by_patient(ten, SplitSpec{0.5, 0.2, 0.2, 0}), std::invalid_argument);
}

TEST_CASE("hypotension detection follows the strict crossing rule") {
    Dataset ds;
    DetectorConfig cfg;
    cfg.kinds = {EventKind::Hypotension};

    auto events_for = [&](const std::vector<double>& vals) {
        PatientTrajectory traj = map_series(ds, vals);
        return detect_events(ds, traj, cfg);
    };

    CHECK(events_for({65, 58}).size() == 1);
    CHECK(events_for({58, 55}).empty());
    auto two = events_for({65, 58, 70, 59});
    REQUIRE(two.size() == 2);
    CHECK(two[0].position == 1);
    CHECK(two[1].position == 3);
    CHECK(two[0].kind == EventKind::Hypotension);

    // exactly 60 neither arms nor fires
    CHECK(events_for({60, 58}).empty());
    CHECK(events_for({65, 60, 58}).empty());
}

TEST_CASE("hypotension count equals the brute-force scan on random series") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> v(40.0, 80.0);
    Dataset ds;
    DetectorConfig cfg;
    cfg.kinds = {EventKind::Hypotension};
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> vals(200);
        for (auto& x : vals) x = v(rng);
        PatientTrajectory traj = map_series(ds, vals);
        auto evs = detect_events(ds, traj, cfg);
        CHECK(static_cast<int>(evs.size()) == brute_force_hypotension_count(vals, 60.0));
    }
}

TEST_CASE("detector validation flags missing features") {
    Dataset ds = dataset_from_text(R"({"patient_id":"a","time":1.0,"feature":"hr","value":70})"
                                   "\n");
    DetectorConfig cfg;
    cfg.kinds = {EventKind::Hypotension};
    cfg.map_feature = "MAP";
    CHECK_THROWS_AS(validate_detector(ds, cfg), std::invalid_argument);
    cfg.kinds = {EventKind::Admission};
    CHECK_NOTHROW(validate_detector(ds, cfg));
}

TEST_CASE("encounter kinds are detected as index events") {
    Dataset ds = dataset_from_text(
        R"({"patient_id":"a","time":1.0,"feature":"hr","value":70}
{"patient_id":"a","time":2.0,"kind":"admission"}
{"patient_id":"a","time":3.0,"kind":"outpatient"}
{"patient_id":"a","time":4.0,"kind":"vent_start"}
)");
    DetectorConfig cfg;
    cfg.kinds = {EventKind::Admission, EventKind::OutpatientVisit, EventKind::VentilationStart};
    auto evs = detect_events(ds, ds.patients[0], cfg);
    REQUIRE(evs.size() == 3);
    CHECK(evs[0].kind == EventKind::Admission);
    CHECK(evs[0].time == 2.0);
    CHECK(ds.patients[0].obs[evs[0].position].time == evs[0].time);
    CHECK(evs[1].kind == EventKind::OutpatientVisit);
    CHECK(evs[2].kind == EventKind::VentilationStart);
}

TEST_CASE("window extraction rejects short history") {
    PatientTrajectory traj = simple_trajectory(100);
    IndexEvent ev{"p", 15, 15.0, EventKind::Admission};
    CHECK_FALSE(extract_window_pair(traj, ev, 512, 16).has_value());  // 15 obs before -> Rejected
    IndexEvent ok{"p", 16, 16.0, EventKind::Admission};
    CHECK(extract_window_pair(traj, ok, 512, 16).has_value());
}

TEST_CASE("window extraction takes the tau observations nearest the event") {
    PatientTrajectory traj = simple_trajectory(1200);
    IndexEvent ev{"p", 600, 600.0, EventKind::Admission};
    auto pair = extract_window_pair(traj, ev, 512, 16);
    REQUIRE(pair.has_value());
    CHECK(pair->pre.size() == 512);
    CHECK(pair->post.size() == 512);
    CHECK(pair->pre.front().time == 600.0 - 512.0);
    CHECK(pair->pre.back().time == 599.0);
    CHECK(pair->post.front().time == 600.0);
    CHECK(pair->post.back().time == 600.0 + 511.0);
    for (size_t i = 1; i < pair->pre.size(); ++i) CHECK(pair->pre[i - 1].time < pair->pre[i].time);
}

TEST_CASE("censoring drops observations nearest the event first") {
    // p1..p6 before the event at position 6; censor_pre=2 drops p5,p6; tau=3 keeps p2,p3,p4
    PatientTrajectory traj = simple_trajectory(12);
    IndexEvent ev{"p", 6, 6.0, EventKind::Admission};
    auto pair = extract_window_pair(traj, ev, 3, 1, 2, 0);
    REQUIRE(pair.has_value());
    REQUIRE(pair->pre.size() == 3);
    CHECK(pair->pre[0].time == 1.0);  // p2 (positions 0..5 are p1..p6)
    CHECK(pair->pre[1].time == 2.0);
    CHECK(pair->pre[2].time == 3.0);

    auto post_censored = extract_window_pair(traj, ev, 3, 1, 0, 2);
    REQUIRE(post_censored.has_value());
    CHECK(post_censored->post[0].time == 8.0);  // event-position obs and the next dropped
}

TEST_CASE("censored extraction rejects when too little remains") {
    PatientTrajectory traj = simple_trajectory(40);
    IndexEvent ev{"p", 20, 20.0, EventKind::Admission};
    CHECK(extract_window_pair(traj, ev, 16, 16, 0, 0).has_value());
    CHECK_FALSE(extract_window_pair(traj, ev, 16, 16, 5, 0).has_value());
    CHECK_FALSE(extract_window_pair(traj, ev, 16, 16, 0, 5).has_value());
}

TEST_CASE("uncensored pre-post concatenation is a contiguous slice") {
    std::mt19937_64 rng(3);
    PatientTrajectory traj = simple_trajectory(300);
    std::uniform_int_distribution<int> pos(30, 270);
    for (int rep = 0; rep < 20; ++rep) {
        const int j = pos(rng);
        IndexEvent ev{"p", j, traj.obs[static_cast<size_t>(j)].time, EventKind::Admission};
        auto pair = extract_window_pair(traj, ev, 25, 4);
        REQUIRE(pair.has_value());
        std::vector<Observation> joined = pair->pre;
        joined.insert(joined.end(), pair->post.begin(), pair->post.end());
        const int start = j - static_cast<int>(pair->pre.size());
        for (size_t i = 0; i < joined.size(); ++i)
            CHECK(joined[i].time == traj.obs[static_cast<size_t>(start) + i].time);
        CHECK(pair->pre.back().time <= ev.time);
        CHECK(pair->post.front().time >= ev.time - 1e-12);
        CHECK(pair->post.front().time == traj.obs[static_cast<size_t>(j)].time);
    }
}

TEST_CASE("label attachment enforces the one-day leakage rule") {
    PatientTrajectory traj = simple_trajectory(40);
    IndexEvent ev{"p", 20, 20.0, EventKind::Admission};
    auto pair = extract_window_pair(traj, ev, 10, 4);
    REQUIRE(pair.has_value());
    const double post_end = pair->post.back().time;

    LabelRule rule;
    rule.task_modes["mortality"] = InputMode::Both;
    rule.task_modes["los"] = InputMode::PreOnly;

    std::vector<OutcomeRecord> close = {{"p", "mortality", post_end + 0.5, 1}};
    CHECK_FALSE(attach_label(*pair, close, "mortality", rule).has_value());

    std::vector<OutcomeRecord> far = {{"p", "mortality", post_end + 2.0, 1}};
    auto labeled = attach_label(*pair, far, "mortality", rule);
    REQUIRE(labeled.has_value());
    CHECK(labeled->labels.at("mortality") == 1);

    // pre-only rule: outcome 1.5 days after the last pre observation is fine
    // even though it lands before the last post observation
    const double pre_end = pair->pre.back().time;
    std::vector<OutcomeRecord> pre_only = {{"p", "los", pre_end + 1.5, 0}};
    CHECK(pre_end + 1.5 < post_end);
    auto los = attach_label(*pair, pre_only, "los", rule);
    REQUIRE(los.has_value());
    CHECK(los->labels.at("los") == 0);

    CHECK_THROWS_AS(attach_label(*pair, far, "unknown_task", rule), std::invalid_argument);
    // no outcome after the event -> Excluded
    std::vector<OutcomeRecord> before = {{"p", "mortality", ev.time - 1.0, 1}};
    CHECK_FALSE(attach_label(*pair, before, "mortality", rule).has_value());
}

TEST_CASE("split manifest round trip") {
    SplitResult s;
    s.train_ids = {"a", "b"};
    s.val_ids = {"c"};
    s.test_ids = {"d"};
    const std::string path = "/tmp/ebcl_test_splits.json";
    write_split_manifest(s, path);
    SplitResult r = read_split_manifest(path);
    CHECK(r.train_ids == s.train_ids);
    CHECK(r.val_ids == s.val_ids);
    CHECK(r.test_ids == s.test_ids);
}

TEST_CASE("outcome parsing groups and sorts by patient") {
    std::istringstream in(
        R"({"patient_id":"b","task":"m","time":5.0,"value":1}
{"patient_id":"a","task":"m","time":3.0,"value":0}
{"patient_id":"a","task":"m","time":1.0,"value":1}
)");
    auto grouped = outcomes_by_patient(read_outcomes_jsonl(in));
    REQUIRE(grouped.count("a") == 1);
    CHECK(grouped["a"].size() == 2);
    CHECK(grouped["a"][0].time == 1.0);
    CHECK(grouped["a"][1].time == 3.0);
    CHECK(grouped["b"].size() == 1);
}
