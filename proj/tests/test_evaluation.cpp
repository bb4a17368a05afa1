#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "ebcl/evaluation.hpp"
#include "support.hpp"

using namespace ebcl::eval;
using ebcl::events::InputMode;

namespace {

// Brute-force AUROC: fraction of positive-negative pairs ranked correctly,
// ties counted one half.
double auroc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0, total = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            total += 1;
            if (scores[i] > scores[j]) wins += 1;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / total;
}

EmbeddingTable table_from(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& post, const std::vector<int>& labels,
                          const std::string& task) {
    EmbeddingTable t;
    for (Eigen::Index i = 0; i < pre.rows(); ++i) {
        EmbeddingRow row;
        row.patient_id = "p" + std::to_string(i);
        row.pre = pre.row(i).transpose();
        row.post = post.row(i).transpose();
        row.labels[task] = labels[static_cast<size_t>(i)];
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace

TEST_CASE("auroc on hand cases") {
    std::vector<double> s1 = {0.9, 0.1, 0.8, 0.2};
    std::vector<int> y1 = {1, 0, 1, 0};
    CHECK(auroc(s1, y1) == 1.0);  // perfectly separated

    std::vector<double> s2 = {0.9, 0.8, 0.7, 0.1};
    std::vector<int> y2 = {1, 0, 1, 0};
    CHECK(auroc(s2, y2) == doctest::Approx(0.75));
    CHECK(auroc_pairs(s2, y2) == doctest::Approx(0.75));

    std::vector<double> s3 = {0.5, 0.5, 0.5, 0.5};
    std::vector<int> y3 = {1, 0, 1, 0};
    CHECK(auroc(s3, y3) == doctest::Approx(0.5));  // all ties

    std::vector<int> single = {1, 1, 1, 1};
    CHECK_THROWS_AS(auroc(s1, single), std::invalid_argument);
}

TEST_CASE("rank-statistic auroc equals the trapezoid integral and the pair count") {
    std::mt19937_64 rng(90);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::bernoulli_distribution lab(0.4);
    std::uniform_int_distribution<int> n_dist(5, 60);
    std::uniform_int_distribution<int> grid(1, 8);
    for (int rep = 0; rep < 300; ++rep) {
        const int n = n_dist(rng);
        std::vector<double> s(static_cast<size_t>(n));
        std::vector<int> y(static_cast<size_t>(n));
        bool pos = false, neg = false;
        for (int i = 0; i < n; ++i) {
            s[static_cast<size_t>(i)] = (rep % 2) ? u(rng) : static_cast<double>(grid(rng)) / 8.0;  // with ties
            y[static_cast<size_t>(i)] = lab(rng) ? 1 : 0;
            (y[static_cast<size_t>(i)] ? pos : neg) = true;
        }
        if (!pos || !neg) continue;
        const double a = auroc(s, y);
        CHECK(std::abs(a - auroc_trapezoid(s, y)) < 1e-12);
        CHECK(std::abs(a - auroc_pairs(s, y)) < 1e-12);
    }
}

TEST_CASE("auroc is invariant under strictly monotone score transforms") {
    std::mt19937_64 rng(91);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (size_t i = 0; i < s.size(); ++i) {
        s[i] = u(rng);
        y[i] = i % 3 == 0;
    }
    const double base = auroc(s, y);
    std::vector<double> warped(s.size());
    for (size_t i = 0; i < s.size(); ++i) warped[i] = std::exp(3.0 * s[i]) + 7.0;
    CHECK(auroc(warped, y) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("auprc on hand cases") {
    // scores descending: labels 1, 0, 1, 0
    // thresholds: P=1,R=1/2 ; then P=2/3,R=1 -> AP = 0.5*1 + 0.5*(2/3)
    std::vector<double> s = {0.9, 0.8, 0.7, 0.1};
    std::vector<int> y = {1, 0, 1, 0};
    CHECK(auprc(s, y) == doctest::Approx(0.5 + 0.5 * (2.0 / 3.0)));

    std::vector<double> perfect = {0.9, 0.8, 0.2, 0.1};
    CHECK(auprc(perfect, y) == doctest::Approx(1.0));
}

TEST_CASE("bootstrap: determinism, constant metric, n=1 convention") {
    std::vector<double> s = {0.9, 0.8, 0.4, 0.3, 0.7, 0.2};
    std::vector<int> y = {1, 1, 0, 0, 1, 0};
    auto metric = [](std::span<const double> sc, std::span<const int> lb) { return auroc(sc, lb); };

    BootstrapResult a = bootstrap(metric, s, y, 200, 5);
    BootstrapResult b = bootstrap(metric, s, y, 200, 5);
    CHECK(a.mean == b.mean);
    CHECK(a.std == b.std);
    CHECK(a.std > 0.0);

    auto constant = [](std::span<const double>, std::span<const int>) { return 0.77; };
    BootstrapResult c = bootstrap(constant, s, y, 100, 6);
    CHECK(c.mean == doctest::Approx(0.77));
    CHECK(c.std == 0.0);

    BootstrapResult one = bootstrap(metric, s, y, 1, 7);
    CHECK(one.std == 0.0);
    CHECK_THROWS_AS(bootstrap(metric, s, y, 0, 8), std::invalid_argument);
}

TEST_CASE("logistic fit separates a separable problem") {
    std::mt19937_64 rng(92);
    Eigen::MatrixXd X(40, 2);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
        const int label = i % 2;
        X(i, 0) = (label ? 2.0 : -2.0) + 0.1 * std::normal_distribution<double>()(rng);
        X(i, 1) = std::normal_distribution<double>()(rng);
        y[static_cast<size_t>(i)] = label;
    }
    LogisticModel m = fit_logistic(X, y, 1e-3);
    const std::vector<double> p = m.predict(X);
    CHECK(auroc(p, y) > 0.99);
}

TEST_CASE("linear probe: label-revealing embeddings score 1.0, noise is at chance") {
    std::mt19937_64 rng(93);
    const int n = 600, d = 4;

    auto make = [&](bool informative, int count) {
        Eigen::MatrixXd pre(count, d), post(count, d);
        std::vector<int> labels(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            const int label = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
            labels[static_cast<size_t>(i)] = label;
            for (int c = 0; c < d; ++c) {
                const double noise = std::normal_distribution<double>()(rng);
                pre(i, c) = informative ? (label ? 1.0 : -1.0) : noise;
                post(i, c) = informative ? (label ? 1.0 : -1.0) : std::normal_distribution<double>()(rng);
            }
        }
        return table_from(pre, post, labels, "task");
    };

    EmbeddingTable tr = make(true, n), va = make(true, 200), te = make(true, 200);
    EvalReport r = linear_probe(tr, va, te, "task", InputMode::Both, {1e-3}, 1);
    CHECK(r.auroc_point == doctest::Approx(1.0));
    CHECK_FALSE(r.degenerate);

    EmbeddingTable ntr = make(false, 2000), nva = make(false, 500), nte = make(false, 2000);
    EvalReport noise = linear_probe(ntr, nva, nte, "task", InputMode::Both, {1e-2}, 2);
    CHECK(noise.auroc_point > 0.45);
    CHECK(noise.auroc_point < 0.55);

    // single-entry grid is selected verbatim
    EvalReport single = linear_probe(tr, va, te, "task", InputMode::Both, {0.5}, 3);
    CHECK(single.config_echo.find("0.5") != std::string::npos);
}

TEST_CASE("linear probe flags zero-variance embeddings instead of crashing") {
    Eigen::MatrixXd flat = Eigen::MatrixXd::Zero(30, 3);
    std::vector<int> labels(30);
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2;
    EmbeddingTable t = table_from(flat, flat, labels, "task");
    EvalReport r = linear_probe(t, t, t, "task", InputMode::Both, {1e-3}, 4);
    CHECK(r.degenerate);
}

TEST_CASE("knn prediction conventions") {
    Eigen::MatrixXd train(4, 2);
    train << 0, 0, 1, 1, 2, 2, 3, 3;
    std::vector<int> y = {1, 0, 0, 1};

    // an exact duplicate with k=1 returns its label with probability 1
    Eigen::MatrixXd q(1, 2);
    q << 0, 0;
    auto p = knn_predict(train, y, q, 1, KnnWeighting::Uniform, KnnMetric::Euclidean);
    CHECK(p[0] == 1.0);

    // distance weighting: a zero-distance neighbor takes exclusive weight
    auto pw = knn_predict(train, y, q, 3, KnnWeighting::Distance, KnnMetric::Euclidean);
    CHECK(pw[0] == 1.0);

    auto uniform3 = knn_predict(train, y, q, 3, KnnWeighting::Uniform, KnnMetric::Euclidean);
    CHECK(uniform3[0] == doctest::Approx(1.0 / 3.0));

    CHECK_THROWS_AS(knn_predict(train, y, q, 5, KnnWeighting::Uniform, KnnMetric::Euclidean),
                    std::invalid_argument);
}

TEST_CASE("knn cosine scoring is invariant to positive row rescaling") {
    std::mt19937_64 rng(94);
    Eigen::MatrixXd train = testsupport::random_matrix(30, 4, rng);
    Eigen::MatrixXd query = testsupport::random_matrix(10, 4, rng);
    std::vector<int> y(30);
    for (size_t i = 0; i < y.size(); ++i) y[i] = i % 2;

    auto base = knn_predict(train, y, query, 5, KnnWeighting::Uniform, KnnMetric::Cosine);
    Eigen::MatrixXd train_scaled = train;
    Eigen::MatrixXd query_scaled = query;
    std::uniform_real_distribution<double> scale(0.1, 9.0);
    for (Eigen::Index i = 0; i < train_scaled.rows(); ++i) train_scaled.row(i) *= scale(rng);
    for (Eigen::Index i = 0; i < query_scaled.rows(); ++i) query_scaled.row(i) *= scale(rng);
    auto scaled = knn_predict(train_scaled, y, query_scaled, 5, KnnWeighting::Uniform, KnnMetric::Cosine);
    for (size_t i = 0; i < base.size(); ++i) CHECK(base[i] == doctest::Approx(scaled[i]).epsilon(1e-9));
}

TEST_CASE("knn ensemble of identical views equals the single model") {
    std::mt19937_64 rng(95);
    const int n = 60;
    Eigen::MatrixXd half = testsupport::random_matrix(n, 3, rng);
    std::vector<int> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = half(i, 0) > 0 ? 1 : 0;
    // pre == post: the pre-only, post-only and concatenated KNNs all rank
    // neighbors identically under euclidean distance
    EmbeddingTable tr = table_from(half, half, labels, "task");
    EmbeddingTable va = tr, te = tr;

    KnnSweep prepost;
    prepost.models = {KnnModel::PrePost};
    prepost.weightings = {KnnWeighting::Uniform};
    prepost.metrics = {KnnMetric::Euclidean};
    prepost.ks = {5};
    KnnSweep ensemble = prepost;
    ensemble.models = {KnnModel::Ensemble};

    EvalReport a = knn_eval(tr, va, te, "task", InputMode::Both, prepost, 1);
    EvalReport b = knn_eval(tr, va, te, "task", InputMode::Both, ensemble, 1);
    CHECK(a.auroc_point == doctest::Approx(b.auroc_point).epsilon(1e-12));

    // ks larger than the training size are skipped; an all-too-large sweep throws
    KnnSweep too_big = prepost;
    too_big.ks = {1000};
    CHECK_THROWS_AS(knn_eval(tr, va, te, "task", InputMode::Both, too_big, 1), std::invalid_argument);
    KnnSweep mixed = prepost;
    mixed.ks = {1000, 5};
    CHECK_NOTHROW(knn_eval(tr, va, te, "task", InputMode::Both, mixed, 1));
}

TEST_CASE("reports serialize and round trip") {
    EvalReport r;
    r.task = "mortality";
    r.method = "linear_probe_ebcl";
    r.auroc_point = 0.81;
    r.auroc_mean = 0.8;
    r.auroc_std = 0.02;
    r.auprc_point = 0.6;
    r.auprc_mean = 0.59;
    r.auprc_std = 0.03;
    r.config_echo = "{\"l2\":0.1}";
    r.seeds = {1, 2, 3};
    EvalReport back = report_from_json(report_to_json(r));
    CHECK(back.task == r.task);
    CHECK(back.method == r.method);
    CHECK(back.auroc_point == r.auroc_point);
    CHECK(back.auprc_std == r.auprc_std);
    CHECK(back.seeds == r.seeds);
}
