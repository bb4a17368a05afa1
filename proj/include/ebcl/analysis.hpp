#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ebcl::analysis {

struct ClusterAssignment {
    int k = 0;
    std::vector<int> labels;
    Eigen::MatrixXd centroids;  // [K x d]
    double inertia = 0.0;
};

/// Lloyd iterations from k-means++ seeding to an assignment fixpoint (or 300
/// iterations); best of n_init restarts by inertia.
ClusterAssignment kmeans(const Eigen::MatrixXd& vectors, int k, uint64_t seed, int n_init = 10,
                         int max_iter = 300);

/// Kneedle-style knee of an inertia-vs-K curve: normalize both axes to
/// [0, 1] and return the K maximizing the gap to the descending diagonal.
/// Ties break to the smallest K. Needs >= 3 grid points.
int elbow_select(std::span<const int> k_grid, std::span<const double> inertias);

struct SurvivalCurve {
    std::vector<double> times;     // distinct event times, ascending
    std::vector<double> survival;  // S(t) at and after each event time
    double at(double t) const;     // S(t); 1.0 before the first event
};

/// Kaplan-Meier product-limit estimator; observed_flags[i] == 0 marks a
/// censored subject.
SurvivalCurve km_curve(std::span<const double> times_to_event, std::span<const int> observed_flags);

struct ContrastResult {
    double t_stat = 0.0;
    double dof = 0.0;
    double p_value = 1.0;
    bool significant = false;
};

/// Welch two-sample t-test with the Welch-Satterthwaite dof, two-sided p,
/// significance at p < alpha. Zero variance in both groups: p = 1 on equal
/// means, a large-finite t sentinel otherwise.
ContrastResult cluster_contrast(std::span<const double> group_a, std::span<const double> group_b,
                                double alpha = 0.01);

/// First two principal-component coordinates (for plots).
Eigen::MatrixXd pca2(const Eigen::MatrixXd& vectors);

struct EventOutcome {
    int label = -1;                      // -1 = unlabeled
    std::optional<double> time_to_event;  // days from event to outcome
};

struct ClusterSummary {
    int cluster = 0;
    int n = 0;
    int n_labeled = 0;
    double prevalence = 0.0;  // NaN when no labeled outcomes
};

struct PairContrast {
    int cluster_a = 0;
    int cluster_b = 0;
    ContrastResult contrast;
};

struct StratificationReport {
    std::vector<ClusterSummary> clusters;  // sorted by prevalence, descending
    std::vector<PairContrast> contrasts;   // pairwise time-to-outcome tests
    double delta_prevalence = 0.0;         // extreme clusters
    Eigen::MatrixXd pca_coords;            // [n x 2]
};

StratificationReport stratification_report(const ClusterAssignment& assignment,
                                           std::span<const EventOutcome> outcomes,
                                           const Eigen::MatrixXd& vectors);

std::string stratification_to_json(const StratificationReport& report);

/// Step-plot of survival curves as a standalone SVG document.
std::string survival_curves_svg(const std::vector<SurvivalCurve>& curves, const std::vector<std::string>& names,
                                double t_max);

}  // namespace ebcl::analysis
