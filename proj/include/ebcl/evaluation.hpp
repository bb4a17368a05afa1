#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ebcl/events.hpp"

namespace ebcl::eval {

/// AUROC as the probability a random positive outranks a random negative,
/// ties counted 1/2 (rank statistic). Throws when a class is missing.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Independent route: trapezoidal integral of the ROC curve.
double auroc_trapezoid(std::span<const double> scores, std::span<const int> labels);

/// Area under the precision-recall curve via step interpolation.
double auprc(std::span<const double> scores, std::span<const int> labels);

struct MetricPair {
    double auroc = 0.0;
    double auprc = 0.0;
};
MetricPair binary_metrics(std::span<const double> scores, std::span<const int> labels);

struct BootstrapResult {
    double mean = 0.0;
    double std = 0.0;  // sample std; 0 by convention when n == 1
};

/// n resamples with replacement; single-class resamples are redrawn.
BootstrapResult bootstrap(const std::function<double(std::span<const double>, std::span<const int>)>& metric,
                          std::span<const double> scores, std::span<const int> labels, int n = 1000,
                          uint64_t seed = 0);

struct EmbeddingRow {
    std::string patient_id;
    double event_time = 0.0;
    Eigen::VectorXd pre;
    Eigen::VectorXd post;
    std::map<std::string, int> labels;
};

struct EmbeddingTable {
    std::vector<EmbeddingRow> rows;
    std::string checkpoint_id;
    std::string split;
};

struct EvalReport {
    std::string task;
    std::string method;
    double auroc_point = 0.0;
    double auroc_mean = 0.0;
    double auroc_std = 0.0;
    double auprc_point = 0.0;
    double auprc_mean = 0.0;
    double auprc_std = 0.0;
    std::string config_echo;  // JSON text of the selected configuration
    std::vector<uint64_t> seeds;
    std::string std_source = "bootstrap";
    bool degenerate = false;
};

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void write_report(const EvalReport& report, const std::string& path);
EvalReport read_report(const std::string& path);

/// L2-regularized logistic regression fit by gradient descent with
/// backtracking line search to ~1e-8 gradient norm.
struct LogisticModel {
    Eigen::VectorXd weights;
    double intercept = 0.0;
    double l2 = 0.0;
    std::vector<double> predict(const Eigen::MatrixXd& X) const;
};

LogisticModel fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& y, double l2,
                           int max_iters = 2000, double grad_tol = 1e-8);

/// Linear probe on frozen embeddings: concat(pre, post) or pre-only features,
/// grid point chosen by validation AUROC, test metrics bootstrapped.
EvalReport linear_probe(const EmbeddingTable& train, const EmbeddingTable& val, const EmbeddingTable& test,
                        const std::string& task, events::InputMode mode,
                        const std::vector<double>& l2_grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0},
                        uint64_t bootstrap_seed = 0);

enum class KnnWeighting : uint8_t { Uniform, Distance };
enum class KnnModel : uint8_t { PrePost, Ensemble };
enum class KnnMetric : uint8_t { Cosine, Euclidean, EuclideanNormalized };

struct KnnSweep {
    std::vector<KnnWeighting> weightings = {KnnWeighting::Uniform, KnnWeighting::Distance};
    std::vector<KnnModel> models = {KnnModel::PrePost, KnnModel::Ensemble};
    std::vector<KnnMetric> metrics = {KnnMetric::Cosine, KnnMetric::Euclidean, KnnMetric::EuclideanNormalized};
    std::vector<int> ks = {10, 30, 100, 300, 1000};
};

/// Predicted positive-class probabilities of a single KNN configuration.
std::vector<double> knn_predict(const Eigen::MatrixXd& train_X, const std::vector<int>& train_y,
                                const Eigen::MatrixXd& query_X, int k, KnnWeighting weighting, KnnMetric metric);

/// Full Cartesian sweep; ks above the training size are skipped with a
/// warning. Ensemble averages pre-only, post-only and concatenated KNNs.
EvalReport knn_eval(const EmbeddingTable& train, const EmbeddingTable& val, const EmbeddingTable& test,
                    const std::string& task, events::InputMode mode, const KnnSweep& sweep = {},
                    uint64_t bootstrap_seed = 0);

/// Rows of `table` with a label for `task`, as (features, labels).
std::pair<Eigen::MatrixXd, std::vector<int>> feature_matrix(const EmbeddingTable& table, const std::string& task,
                                                            events::InputMode mode);

}  // namespace ebcl::eval
