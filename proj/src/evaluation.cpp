#include "ebcl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ebcl::eval {

using nlohmann::json;

namespace {

void check_two_classes(std::span<const int> labels) {
    bool has_pos = false, has_neg = false;
    for (int y : labels) {
        if (y == 1) has_pos = true;
        else if (y == 0) has_neg = true;
        else throw std::invalid_argument("binary_metrics: labels must be 0/1");
    }
    if (!has_pos || !has_neg) throw std::invalid_argument("binary_metrics: both classes must be present");
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("binary_metrics: size mismatch or empty");
    check_two_classes(labels);
    const size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tied scores, then the Mann-Whitney statistic.
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg_rank;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    size_t n_pos = 0;
    for (size_t k = 0; k < n; ++k)
        if (labels[k] == 1) {
            rank_sum_pos += rank[k];
            ++n_pos;
        }
    const size_t n_neg = n - n_pos;
    const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auroc_trapezoid(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("binary_metrics: size mismatch or empty");
    check_two_classes(labels);
    const size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    double n_pos = 0, n_neg = 0;
    for (int y : labels) (y == 1 ? n_pos : n_neg) += 1.0;

    double area = 0.0;
    double tp = 0.0, fp = 0.0, prev_tp = 0.0, prev_fp = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) (labels[order[k]] == 1 ? tp : fp) += 1.0;
        area += 0.5 * (fp - prev_fp) / n_neg * (tp + prev_tp) / n_pos;
        prev_tp = tp;
        prev_fp = fp;
        i = j + 1;
    }
    return area;
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("binary_metrics: size mismatch or empty");
    check_two_classes(labels);
    const size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    double n_pos = 0;
    for (int y : labels) n_pos += (y == 1);

    double area = 0.0;
    double tp = 0.0, taken = 0.0, prev_recall = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            taken += 1.0;
            tp += (labels[order[k]] == 1);
        }
        const double recall = tp / n_pos;
        const double precision = tp / taken;
        area += (recall - prev_recall) * precision;  // step interpolation
        prev_recall = recall;
        i = j + 1;
    }
    return area;
}

MetricPair binary_metrics(std::span<const double> scores, std::span<const int> labels) {
    return MetricPair{auroc(scores, labels), auprc(scores, labels)};
}

BootstrapResult bootstrap(const std::function<double(std::span<const double>, std::span<const int>)>& metric,
                          std::span<const double> scores, std::span<const int> labels, int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("bootstrap: n must be >= 1");
    const size_t size = scores.size();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, size - 1);

    std::vector<double> values;
    values.reserve(static_cast<size_t>(n));
    std::vector<double> s(size);
    std::vector<int> y(size);
    const long max_attempts = 1000L * n + 1000L;
    long attempts = 0;
    while (static_cast<int>(values.size()) < n) {
        if (++attempts > max_attempts)
            throw std::runtime_error("bootstrap: could not draw a two-class resample");
        bool pos = false, neg = false;
        for (size_t i = 0; i < size; ++i) {
            const size_t idx = pick(rng);
            s[i] = scores[idx];
            y[i] = labels[idx];
            (y[i] == 1 ? pos : neg) = true;
        }
        if (!pos || !neg) continue;
        values.push_back(metric(s, y));
    }
    BootstrapResult out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
    if (n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / static_cast<double>(n - 1));
    }
    return out;
}

std::vector<double> LogisticModel::predict(const Eigen::MatrixXd& X) const {
    std::vector<double> out(static_cast<size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double z = X.row(i).dot(weights) + intercept;
        out[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-z));
    }
    return out;
}

LogisticModel fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& y, double l2, int max_iters,
                           double grad_tol) {
    const Eigen::Index n = X.rows(), d = X.cols();
    if (static_cast<size_t>(n) != y.size() || n == 0) throw std::invalid_argument("fit_logistic: size mismatch");
    Eigen::VectorXd yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<size_t>(i)];

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    double b = 0.0;

    auto objective = [&](const Eigen::VectorXd& wv, double bv) {
        Eigen::ArrayXd z = (X * wv).array() + bv;
        // stable BCE: max(z,0) - z*y + log1p(exp(-|z|))
        double loss = (z.max(0.0) - z * yv.array() + (1.0 + (-z.abs()).exp()).log()).sum() / static_cast<double>(n);
        return loss + l2 * wv.squaredNorm();
    };

    double fx = objective(w, b);
    for (int iter = 0; iter < max_iters; ++iter) {
        Eigen::ArrayXd z = (X * w).array() + b;
        Eigen::ArrayXd p = 1.0 / (1.0 + (-z).exp());
        Eigen::VectorXd resid = (p - yv.array()).matrix() / static_cast<double>(n);
        Eigen::VectorXd gw = X.transpose() * resid + 2.0 * l2 * w;
        const double gb = resid.sum();
        const double gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
        if (gnorm < grad_tol) break;

        double step = 1.0;
        const double g2 = gw.squaredNorm() + gb * gb;
        while (step > 1e-16) {
            const double fnew = objective(w - step * gw, b - step * gb);
            if (fnew <= fx - 0.5 * step * g2) {
                w -= step * gw;
                b -= step * gb;
                fx = fnew;
                break;
            }
            step *= 0.5;
        }
        if (step <= 1e-16) break;
    }
    LogisticModel model;
    model.weights = w;
    model.intercept = b;
    model.l2 = l2;
    return model;
}

std::pair<Eigen::MatrixXd, std::vector<int>> feature_matrix(const EmbeddingTable& table, const std::string& task,
                                                            events::InputMode mode) {
    std::vector<const EmbeddingRow*> rows;
    for (const auto& r : table.rows)
        if (r.labels.count(task)) rows.push_back(&r);
    if (rows.empty()) throw std::invalid_argument("evaluation: no rows labeled for task '" + task + "'");
    const Eigen::Index d_pre = rows[0]->pre.size();
    const Eigen::Index d_post = rows[0]->post.size();
    Eigen::Index d = 0;
    switch (mode) {
        case events::InputMode::Both: d = d_pre + d_post; break;
        case events::InputMode::PreOnly: d = d_pre; break;
        case events::InputMode::PostOnly: d = d_post; break;
    }
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), d);
    std::vector<int> y(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& r = *rows[i];
        switch (mode) {
            case events::InputMode::Both:
                X.row(static_cast<Eigen::Index>(i)) << r.pre.transpose(), r.post.transpose();
                break;
            case events::InputMode::PreOnly: X.row(static_cast<Eigen::Index>(i)) = r.pre.transpose(); break;
            case events::InputMode::PostOnly: X.row(static_cast<Eigen::Index>(i)) = r.post.transpose(); break;
        }
        y[i] = r.labels.at(task);
    }
    return {std::move(X), std::move(y)};
}

EvalReport linear_probe(const EmbeddingTable& train, const EmbeddingTable& val, const EmbeddingTable& test,
                        const std::string& task, events::InputMode mode, const std::vector<double>& l2_grid,
                        uint64_t bootstrap_seed) {
    if (l2_grid.empty()) throw std::invalid_argument("linear_probe: empty l2 grid");
    auto [Xtr, ytr] = feature_matrix(train, task, mode);
    auto [Xva, yva] = feature_matrix(val, task, mode);
    auto [Xte, yte] = feature_matrix(test, task, mode);

    EvalReport report;
    report.task = task;
    report.method = "linear_probe";

    // Zero-variance embeddings produce a warning flag, not a crash.
    const Eigen::VectorXd mean = Xtr.colwise().mean();
    const Eigen::VectorXd var = ((Xtr.rowwise() - mean.transpose()).array().square().colwise().mean()).matrix();
    if (var.maxCoeff() < 1e-18) report.degenerate = true;

    double best_val = -1.0;
    double best_l2 = l2_grid.front();
    LogisticModel best_model;
    for (double l2 : l2_grid) {
        LogisticModel model = fit_logistic(Xtr, ytr, l2);
        const std::vector<double> val_scores = model.predict(Xva);
        const double val_auroc = auroc(val_scores, yva);
        if (val_auroc > best_val) {
            best_val = val_auroc;
            best_l2 = l2;
            best_model = model;
        }
    }

    const std::vector<double> test_scores = best_model.predict(Xte);
    report.auroc_point = auroc(test_scores, yte);
    report.auprc_point = auprc(test_scores, yte);
    BootstrapResult roc = bootstrap([](auto s, auto l) { return auroc(s, l); }, test_scores, yte, 1000, bootstrap_seed);
    BootstrapResult prc = bootstrap([](auto s, auto l) { return auprc(s, l); }, test_scores, yte, 1000, bootstrap_seed);
    report.auroc_mean = roc.mean;
    report.auroc_std = roc.std;
    report.auprc_mean = prc.mean;
    report.auprc_std = prc.std;
    json echo;
    echo["l2"] = best_l2;
    echo["val_auroc"] = best_val;
    echo["mode"] = events::to_string(mode);
    report.config_echo = echo.dump();
    return report;
}

namespace {

Eigen::MatrixXd knn_features(const EmbeddingTable& table, const std::string& task, events::InputMode task_mode,
                             events::InputMode part, KnnMetric metric) {
    auto [X, y] = feature_matrix(table, task, part);
    (void)y;
    if (metric == KnnMetric::EuclideanNormalized && part == events::InputMode::Both && task_mode == events::InputMode::Both) {
        // Normalize the pre and post halves individually.
        const Eigen::Index d_pre = table.rows.front().pre.size();
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            const double n1 = X.row(i).head(d_pre).norm();
            const double n2 = X.row(i).tail(X.cols() - d_pre).norm();
            if (n1 > 0) X.row(i).head(d_pre) /= n1;
            if (n2 > 0) X.row(i).tail(X.cols() - d_pre) /= n2;
        }
    } else if (metric == KnnMetric::EuclideanNormalized) {
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            const double n1 = X.row(i).norm();
            if (n1 > 0) X.row(i) /= n1;
        }
    }
    return X;
}

double knn_distance(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b, KnnMetric metric) {
    if (metric == KnnMetric::Cosine) {
        const double na = a.norm(), nb = b.norm();
        if (na < 1e-300 || nb < 1e-300) return 1.0;
        return 1.0 - a.dot(b) / (na * nb);
    }
    return (a - b).norm();
}

}  // namespace

std::vector<double> knn_predict(const Eigen::MatrixXd& train_X, const std::vector<int>& train_y,
                                const Eigen::MatrixXd& query_X, int k, KnnWeighting weighting, KnnMetric metric) {
    const Eigen::Index n_train = train_X.rows();
    if (k < 1 || k > n_train) throw std::invalid_argument("knn_predict: k out of range");
    std::vector<double> out(static_cast<size_t>(query_X.rows()));
    std::vector<std::pair<double, Eigen::Index>> dist(static_cast<size_t>(n_train));
    for (Eigen::Index q = 0; q < query_X.rows(); ++q) {
        for (Eigen::Index i = 0; i < n_train; ++i)
            dist[static_cast<size_t>(i)] = {knn_distance(query_X.row(q), train_X.row(i), metric), i};
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

        if (weighting == KnnWeighting::Uniform) {
            double pos = 0;
            for (int i = 0; i < k; ++i) pos += train_y[static_cast<size_t>(dist[static_cast<size_t>(i)].second)];
            out[static_cast<size_t>(q)] = pos / k;
        } else {
            // Zero-distance neighbors take exclusive (equal) weight.
            int n_zero = 0;
            for (int i = 0; i < k; ++i) n_zero += dist[static_cast<size_t>(i)].first <= 0.0;
            double wsum = 0.0, pos = 0.0;
            for (int i = 0; i < k; ++i) {
                const auto& [d, idx] = dist[static_cast<size_t>(i)];
                double w;
                if (n_zero > 0)
                    w = (d <= 0.0) ? 1.0 / n_zero : 0.0;
                else
                    w = 1.0 / d;
                wsum += w;
                pos += w * train_y[static_cast<size_t>(idx)];
            }
            out[static_cast<size_t>(q)] = wsum > 0 ? pos / wsum : 0.5;
        }
    }
    return out;
}

EvalReport knn_eval(const EmbeddingTable& train, const EmbeddingTable& val, const EmbeddingTable& test,
                    const std::string& task, events::InputMode mode, const KnnSweep& sweep, uint64_t bootstrap_seed) {
    if (sweep.ks.empty() || sweep.weightings.empty() || sweep.models.empty() || sweep.metrics.empty())
        throw std::invalid_argument("knn_eval: empty sweep");

    auto [dummy_tr, ytr] = feature_matrix(train, task, mode);
    auto [dummy_va, yva] = feature_matrix(val, task, mode);
    auto [dummy_te, yte] = feature_matrix(test, task, mode);
    const int n_train = static_cast<int>(ytr.size());

    // Pre-only tasks collapse both models to a single pre-only KNN.
    std::vector<KnnModel> models = sweep.models;
    if (mode != events::InputMode::Both) models = {KnnModel::PrePost};

    struct Config {
        KnnWeighting weighting;
        KnnModel model;
        KnnMetric metric;
        int k;
    };

    auto predict_with = [&](const Config& c, const EmbeddingTable& queries) {
        std::vector<events::InputMode> parts;
        if (mode != events::InputMode::Both) {
            parts = {mode};
        } else if (c.model == KnnModel::PrePost) {
            parts = {events::InputMode::Both};
        } else {
            parts = {events::InputMode::PreOnly, events::InputMode::PostOnly, events::InputMode::Both};
        }
        std::vector<double> probs;
        for (auto part : parts) {
            Eigen::MatrixXd tr = knn_features(train, task, mode, part, c.metric);
            Eigen::MatrixXd qu = knn_features(queries, task, mode, part, c.metric);
            std::vector<double> p = knn_predict(tr, ytr, qu, c.k, c.weighting, c.metric);
            if (probs.empty()) {
                probs = std::move(p);
            } else {
                for (size_t i = 0; i < probs.size(); ++i) probs[i] += p[i];
            }
        }
        for (auto& v : probs) v /= static_cast<double>(parts.size());
        return probs;
    };

    bool any_k = false;
    double best_val = -1.0;
    Config best{};
    for (auto weighting : sweep.weightings)
        for (auto model : models)
            for (auto metric : sweep.metrics)
                for (int k : sweep.ks) {
                    if (k > n_train) {
                        std::cerr << "[knn_eval] skipping k=" << k << " > train size " << n_train << "\n";
                        continue;
                    }
                    any_k = true;
                    Config c{weighting, model, metric, k};
                    const double val_auroc = auroc(predict_with(c, val), yva);
                    if (val_auroc > best_val) {
                        best_val = val_auroc;
                        best = c;
                    }
                }
    if (!any_k) throw std::invalid_argument("knn_eval: every k in the sweep exceeds the training size");

    const std::vector<double> test_scores = predict_with(best, test);
    EvalReport report;
    report.task = task;
    report.method = "knn";
    report.auroc_point = auroc(test_scores, yte);
    report.auprc_point = auprc(test_scores, yte);
    BootstrapResult roc =
        bootstrap([](auto s, auto l) { return auroc(s, l); }, test_scores, yte, 1000, bootstrap_seed);
    BootstrapResult prc =
        bootstrap([](auto s, auto l) { return auprc(s, l); }, test_scores, yte, 1000, bootstrap_seed);
    report.auroc_mean = roc.mean;
    report.auroc_std = roc.std;
    report.auprc_mean = prc.mean;
    report.auprc_std = prc.std;
    json echo;
    echo["weighting"] = best.weighting == KnnWeighting::Uniform ? "uniform" : "distance";
    echo["model"] = best.model == KnnModel::PrePost ? "pre_and_post" : "ensemble";
    echo["metric"] = best.metric == KnnMetric::Cosine ? "cosine"
                     : best.metric == KnnMetric::Euclidean ? "euclidean"
                                                           : "euclidean_normalized";
    echo["k"] = best.k;
    echo["val_auroc"] = best_val;
    report.config_echo = echo.dump();
    return report;
}

std::string report_to_json(const EvalReport& r) {
    json j;
    j["task"] = r.task;
    j["method"] = r.method;
    j["auroc"] = {{"point", r.auroc_point}, {"mean", r.auroc_mean}, {"std", r.auroc_std}};
    j["auprc"] = {{"point", r.auprc_point}, {"mean", r.auprc_mean}, {"std", r.auprc_std}};
    j["config"] = r.config_echo.empty() ? json::object() : json::parse(r.config_echo);
    j["seeds"] = r.seeds;
    j["std_source"] = r.std_source;
    j["degenerate"] = r.degenerate;
    return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
    json j = json::parse(text);
    EvalReport r;
    r.task = j.at("task").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.auroc_point = j.at("auroc").at("point").get<double>();
    r.auroc_mean = j.at("auroc").at("mean").get<double>();
    r.auroc_std = j.at("auroc").at("std").get<double>();
    r.auprc_point = j.at("auprc").at("point").get<double>();
    r.auprc_mean = j.at("auprc").at("mean").get<double>();
    r.auprc_std = j.at("auprc").at("std").get<double>();
    r.config_echo = j.at("config").dump();
    r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    r.std_source = j.at("std_source").get<std::string>();
    r.degenerate = j.at("degenerate").get<bool>();
    return r;
}

void write_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    out << report_to_json(report) << "\n";
}

EvalReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read report: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return report_from_json(ss.str());
}

}  // namespace ebcl::eval
