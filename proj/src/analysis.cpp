#include "ebcl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

namespace ebcl::analysis {

using nlohmann::json;

namespace {

double squared_distance(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    return (a - b).squaredNorm();
}

struct LloydResult {
    std::vector<int> labels;
    Eigen::MatrixXd centroids;
    double inertia;
};

LloydResult lloyd_once(const Eigen::MatrixXd& X, int k, std::mt19937_64& rng, int max_iter) {
    const Eigen::Index n = X.rows();

    // k-means++ seeding
    Eigen::MatrixXd centroids(k, X.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    centroids.row(0) = X.row(first(rng));
    Eigen::VectorXd d2(n);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = squared_distance(X.row(i), centroids.row(0));
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index chosen = 0;
        if (total > 0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng);
            for (Eigen::Index i = 0; i < n; ++i) {
                r -= d2(i);
                if (r <= 0) {
                    chosen = i;
                    break;
                }
            }
        } else {
            std::uniform_int_distribution<Eigen::Index> any(0, n - 1);
            chosen = any(rng);
        }
        centroids.row(c) = X.row(chosen);
        for (Eigen::Index i = 0; i < n; ++i)
            d2(i) = std::min(d2(i), squared_distance(X.row(i), centroids.row(c)));
    }

    std::vector<int> labels(static_cast<size_t>(n), -1);
    for (int iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = squared_distance(X.row(i), centroids.row(0));
            for (int c = 1; c < k; ++c) {
                const double d = squared_distance(X.row(i), centroids.row(c));
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (labels[static_cast<size_t>(i)] != best) {
                labels[static_cast<size_t>(i)] = best;
                changed = true;
            }
        }
        if (!changed) break;

        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, X.cols());
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(labels[static_cast<size_t>(i)]) += X.row(i);
            counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]++;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) {
                centroids.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                Eigen::Index far = 0;
                double far_d = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double d = squared_distance(X.row(i), centroids.row(labels[static_cast<size_t>(i)]));
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                centroids.row(c) = X.row(far);
            }
        }
    }

    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        inertia += squared_distance(X.row(i), centroids.row(labels[static_cast<size_t>(i)]));
    return {std::move(labels), std::move(centroids), inertia};
}

}  // namespace

ClusterAssignment kmeans(const Eigen::MatrixXd& X, int k, uint64_t seed, int n_init, int max_iter) {
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    if (X.rows() < k) throw std::invalid_argument("kmeans: k exceeds the number of points");
    if (n_init < 1) throw std::invalid_argument("kmeans: n_init must be >= 1");

    std::mt19937_64 rng(seed);
    LloydResult best{{}, {}, std::numeric_limits<double>::infinity()};
    for (int restart = 0; restart < n_init; ++restart) {
        LloydResult r = lloyd_once(X, k, rng, max_iter);
        if (r.inertia < best.inertia) best = std::move(r);
    }
    ClusterAssignment out;
    out.k = k;
    out.labels = std::move(best.labels);
    out.centroids = std::move(best.centroids);
    out.inertia = best.inertia;
    return out;
}

int elbow_select(std::span<const int> k_grid, std::span<const double> inertias) {
    if (k_grid.size() != inertias.size()) throw std::invalid_argument("elbow_select: size mismatch");
    const size_t n = k_grid.size();
    if (n < 3) throw std::invalid_argument("elbow_select: need at least 3 grid points");
    for (size_t i = 1; i < n; ++i)
        if (k_grid[i] <= k_grid[i - 1]) throw std::invalid_argument("elbow_select: K grid must ascend");
    for (double v : inertias)
        if (!(v > 0)) throw std::invalid_argument("elbow_select: inertias must be positive");

    const double k_lo = k_grid.front(), k_hi = k_grid.back();
    double i_lo = inertias[0], i_hi = inertias[0];
    for (double v : inertias) {
        i_lo = std::min(i_lo, v);
        i_hi = std::max(i_hi, v);
    }
    const double i_span = std::max(i_hi - i_lo, 1e-300);

    // Difference between the normalized decreasing curve and the diagonal;
    // flat curves tie-break to the smallest K.
    int best_k = k_grid.front();
    double best_d = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < n; ++i) {
        const double x = (static_cast<double>(k_grid[i]) - k_lo) / (k_hi - k_lo);
        const double y = (inertias[i] - i_lo) / i_span;
        const double d = 1.0 - x - y;
        if (d > best_d + 1e-12) {
            best_d = d;
            best_k = k_grid[i];
        }
    }
    return best_k;
}

double SurvivalCurve::at(double t) const {
    double s = 1.0;
    for (size_t i = 0; i < times.size(); ++i) {
        if (times[i] <= t) s = survival[i];
        else break;
    }
    return s;
}

SurvivalCurve km_curve(std::span<const double> times_to_event, std::span<const int> observed_flags) {
    if (times_to_event.size() != observed_flags.size())
        throw std::invalid_argument("km_curve: size mismatch");
    for (double t : times_to_event)
        if (t < 0) throw std::invalid_argument("km_curve: negative time");

    // Distinct observed-event times, ascending.
    std::map<double, int> events;  // time -> d_i
    for (size_t i = 0; i < times_to_event.size(); ++i)
        if (observed_flags[i]) events[times_to_event[i]]++;

    SurvivalCurve curve;
    double s = 1.0;
    for (const auto& [t, d] : events) {
        int at_risk = 0;
        for (size_t i = 0; i < times_to_event.size(); ++i)
            if (times_to_event[i] >= t) ++at_risk;
        s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
        curve.times.push_back(t);
        curve.survival.push_back(s);
    }
    return curve;
}

ContrastResult cluster_contrast(std::span<const double> a, std::span<const double> b, double alpha) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("cluster_contrast: both groups need >= 2 samples");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / na;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / nb;
    double va = 0.0, vb = 0.0;
    for (double x : a) va += (x - ma) * (x - ma);
    for (double x : b) vb += (x - mb) * (x - mb);
    va /= (na - 1.0);
    vb /= (nb - 1.0);

    ContrastResult out;
    const double denom2 = va / na + vb / nb;
    if (denom2 <= 0.0) {
        if (ma == mb) {
            out.t_stat = 0.0;
            out.dof = na + nb - 2.0;
            out.p_value = 1.0;
            out.significant = false;
        } else {
            // Degenerate zero-variance groups with different means.
            out.t_stat = (ma > mb ? 1.0 : -1.0) * 1e12;
            out.dof = na + nb - 2.0;
            out.p_value = 0.0;
            out.significant = true;
        }
        return out;
    }
    out.t_stat = (ma - mb) / std::sqrt(denom2);
    const double ra = va / na, rb = vb / nb;
    out.dof = (ra + rb) * (ra + rb) /
              (ra * ra / (na - 1.0) + rb * rb / (nb - 1.0));
    boost::math::students_t dist(out.dof);
    out.p_value = 2.0 * boost::math::cdf(dist, -std::abs(out.t_stat));
    out.significant = out.p_value < alpha;
    return out;
}

Eigen::MatrixXd pca2(const Eigen::MatrixXd& X) {
    if (X.rows() < 1 || X.cols() < 1) throw std::invalid_argument("pca2: empty input");
    Eigen::RowVectorXd mean = X.colwise().mean();
    Eigen::MatrixXd centered = X.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(X.rows() - 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const Eigen::Index d = X.cols();
    Eigen::MatrixXd components(d, 2);
    components.col(0) = solver.eigenvectors().col(d - 1);
    if (d >= 2)
        components.col(1) = solver.eigenvectors().col(d - 2);
    else
        components.col(1).setZero();
    return centered * components;
}

StratificationReport stratification_report(const ClusterAssignment& assignment,
                                           std::span<const EventOutcome> outcomes, const Eigen::MatrixXd& vectors) {
    if (assignment.labels.size() != outcomes.size() ||
        static_cast<Eigen::Index>(assignment.labels.size()) != vectors.rows())
        throw std::invalid_argument("stratification_report: misaligned inputs");

    const double nan = std::numeric_limits<double>::quiet_NaN();
    StratificationReport report;
    std::vector<std::vector<double>> times_by_cluster(static_cast<size_t>(assignment.k));
    std::vector<ClusterSummary> summaries(static_cast<size_t>(assignment.k));
    for (int c = 0; c < assignment.k; ++c) summaries[static_cast<size_t>(c)].cluster = c;

    for (size_t i = 0; i < outcomes.size(); ++i) {
        const int c = assignment.labels[i];
        auto& s = summaries[static_cast<size_t>(c)];
        s.n++;
        if (outcomes[i].label >= 0) {
            s.n_labeled++;
            s.prevalence += outcomes[i].label;
        }
        if (outcomes[i].time_to_event) times_by_cluster[static_cast<size_t>(c)].push_back(*outcomes[i].time_to_event);
    }
    for (auto& s : summaries) s.prevalence = s.n_labeled > 0 ? s.prevalence / s.n_labeled : nan;

    // Sorted by prevalence, descending; unlabeled clusters sink to the end.
    std::stable_sort(summaries.begin(), summaries.end(), [](const ClusterSummary& a, const ClusterSummary& b) {
        const double pa = std::isnan(a.prevalence) ? -1.0 : a.prevalence;
        const double pb = std::isnan(b.prevalence) ? -1.0 : b.prevalence;
        return pa > pb;
    });
    report.clusters = summaries;

    std::vector<const ClusterSummary*> labeled;
    for (const auto& s : summaries)
        if (s.n_labeled > 0) labeled.push_back(&s);
    report.delta_prevalence =
        labeled.size() >= 2 ? labeled.front()->prevalence - labeled.back()->prevalence : 0.0;

    for (size_t i = 0; i < labeled.size(); ++i) {
        for (size_t j = i + 1; j < labeled.size(); ++j) {
            const auto& ta = times_by_cluster[static_cast<size_t>(labeled[i]->cluster)];
            const auto& tb = times_by_cluster[static_cast<size_t>(labeled[j]->cluster)];
            if (ta.size() < 2 || tb.size() < 2) continue;
            report.contrasts.push_back(PairContrast{labeled[i]->cluster, labeled[j]->cluster,
                                                    cluster_contrast(ta, tb)});
        }
    }

    report.pca_coords = pca2(vectors);
    return report;
}

std::string stratification_to_json(const StratificationReport& report) {
    json j;
    json clusters = json::array();
    for (const auto& c : report.clusters) {
        json jc;
        jc["cluster"] = c.cluster;
        jc["n"] = c.n;
        jc["n_labeled"] = c.n_labeled;
        if (std::isnan(c.prevalence)) jc["prevalence"] = nullptr;
        else jc["prevalence"] = c.prevalence;
        clusters.push_back(std::move(jc));
    }
    j["clusters"] = std::move(clusters);
    j["delta_prevalence"] = report.delta_prevalence;
    json contrasts = json::array();
    for (const auto& pc : report.contrasts) {
        json jc;
        jc["cluster_a"] = pc.cluster_a;
        jc["cluster_b"] = pc.cluster_b;
        jc["t_stat"] = pc.contrast.t_stat;
        jc["dof"] = pc.contrast.dof;
        jc["p_value"] = pc.contrast.p_value;
        jc["significant"] = pc.contrast.significant;
        contrasts.push_back(std::move(jc));
    }
    j["contrasts"] = std::move(contrasts);
    return j.dump(2);
}

std::string survival_curves_svg(const std::vector<SurvivalCurve>& curves, const std::vector<std::string>& names,
                                double t_max) {
    if (curves.size() != names.size()) throw std::invalid_argument("survival_curves_svg: size mismatch");
    const double W = 640, H = 420, ml = 50, mr = 20, mt = 20, mb = 40;
    const double pw = W - ml - mr, ph = H - mt - mb;
    const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
                             "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

    auto sx = [&](double t) { return ml + (t_max > 0 ? t / t_max : 0.0) * pw; };
    auto sy = [&](double s) { return mt + (1.0 - s) * ph; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
        << "\" stroke=\"black\"/>\n";
    for (size_t c = 0; c < curves.size(); ++c) {
        const auto& cur = curves[c];
        std::ostringstream path;
        double s = 1.0;
        path << "M " << sx(0) << " " << sy(1.0);
        for (size_t i = 0; i < cur.times.size(); ++i) {
            path << " H " << sx(std::min(cur.times[i], t_max));
            s = cur.survival[i];
            path << " V " << sy(s);
        }
        path << " H " << sx(t_max);
        svg << "<path d=\"" << path.str() << "\" fill=\"none\" stroke=\"" << palette[c % 10]
            << "\" stroke-width=\"1.5\"/>\n";
        svg << "<text x=\"" << ml + pw - 150 << "\" y=\"" << mt + 16 + 16 * static_cast<double>(c) << "\" fill=\""
            << palette[c % 10] << "\" font-size=\"12\">" << names[c] << "</text>\n";
    }
    svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 8 << "\" font-size=\"12\" text-anchor=\"middle\">days</text>\n";
    svg << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
        << mt + ph / 2 << ")\" text-anchor=\"middle\">survival</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace ebcl::analysis
