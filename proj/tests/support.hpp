#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ebcl/encoder.hpp"
#include "ebcl/events.hpp"
#include "ebcl/featurizer.hpp"
#include "ebcl/nn.hpp"

namespace testsupport {

using ebcl::nn::Matrix;

struct GradCheck {
    std::map<std::string, double> rel_err;  // per parameter group
    double worst = 0.0;
    std::string worst_name;
};

/// Central finite differences (h, double precision) against analytic grads.
/// Relative error per group: ||ga - gfd||_F / max(||ga||_F, ||gfd||_F, tiny).
inline GradCheck finite_difference_check(ebcl::model::ParamStore& params,
                                         const std::function<double(const ebcl::model::ParamStore&)>& loss,
                                         const std::map<std::string, Matrix>& analytic, double h = 1e-5) {
    GradCheck out;
    for (const auto& name : params.names()) {
        Matrix& tensor = params.at(name);
        Matrix fd = Matrix::Zero(tensor.rows(), tensor.cols());
        for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
            for (Eigen::Index c = 0; c < tensor.cols(); ++c) {
                const double saved = tensor(r, c);
                tensor(r, c) = saved + h;
                const double up = loss(params);
                tensor(r, c) = saved - h;
                const double down = loss(params);
                tensor(r, c) = saved;
                fd(r, c) = (up - down) / (2.0 * h);
            }
        }
        Matrix ga = Matrix::Zero(tensor.rows(), tensor.cols());
        auto it = analytic.find(name);
        if (it != analytic.end()) ga = it->second;
        const double denom = std::max({ga.norm(), fd.norm(), 1e-10});
        const double rel = (ga - fd).norm() / denom;
        out.rel_err[name] = rel;
        if (rel > out.worst) {
            out.worst = rel;
            out.worst_name = name;
        }
    }
    return out;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

inline Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    Matrix m = random_matrix(rows, cols, rng);
    for (Eigen::Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).norm();
    return m;
}

/// A tiny two-feature dataset (continuous "hr", categorical "rhythm") with
/// enough observations to clear any min_count <= n_per_patient.
inline ebcl::events::Dataset tiny_dataset(int n_patients, int n_obs_per_patient, uint64_t seed) {
    ebcl::events::Dataset ds;
    const int hr = ds.intern_feature("hr");
    const int rhythm = ds.intern_feature("rhythm");
    const int enc = ds.intern_feature("__encounter__");
    const int sinus = ds.intern_category("sinus");
    const int afib = ds.intern_category("afib");
    const int adm = ds.intern_category("admission");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> val(0.0, 1.0);
    for (int p = 0; p < n_patients; ++p) {
        ebcl::events::PatientTrajectory traj;
        traj.patient_id = "p" + std::to_string(1000 + p);
        double t = 0.0;
        for (int i = 0; i < n_obs_per_patient; ++i) {
            t += 0.1 + 0.05 * (p % 3);
            ebcl::events::Observation o;
            o.time = t;
            if (i % 3 == 2) {
                o.feature_id = rhythm;
                o.is_categorical = true;
                o.cat_value = (i % 6 == 5) ? afib : sinus;
            } else {
                o.feature_id = hr;
                o.is_categorical = false;
                o.cont_value = 60.0 + 10.0 * val(rng) + p;
            }
            traj.obs.push_back(o);
        }
        // admission record mid-trajectory
        ebcl::events::Observation a;
        a.time = traj.obs[traj.obs.size() / 2].time + 1e-4;
        a.feature_id = enc;
        a.is_categorical = true;
        a.cat_value = adm;
        a.kind = ebcl::events::RecordKind::Admission;
        traj.obs.insert(traj.obs.begin() + static_cast<ptrdiff_t>(traj.obs.size() / 2 + 1), a);
        ds.patients.push_back(std::move(traj));
    }
    return ds;
}

inline ebcl::feat::Vocabulary tiny_vocab(const ebcl::events::Dataset& ds) {
    return ebcl::feat::build_vocabulary(ds, 1);
}

}  // namespace testsupport
