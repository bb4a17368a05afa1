#include "ebcl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace ebcl::objectives {

using events::Dataset;
using events::Observation;
using events::PatientTrajectory;
using events::WindowPair;
using feat::TokenRow;
using feat::Vocabulary;
using model::BoundParams;
using model::ParamStore;
using nn::Matrix;
using nn::Tape;
using nn::Value;

const char* to_string(Objective o) {
    switch (o) {
        case Objective::Ebcl: return "ebcl";
        case Objective::Ocp: return "ocp";
        case Objective::Strats: return "strats";
        case Objective::Duett: return "duett";
    }
    return "ebcl";
}

Objective objective_from_string(const std::string& s) {
    if (s == "ebcl") return Objective::Ebcl;
    if (s == "ocp") return Objective::Ocp;
    if (s == "strats") return Objective::Strats;
    if (s == "duett") return Objective::Duett;
    throw std::invalid_argument("unknown objective: " + s);
}

PairDataset encode_pairs(const std::vector<WindowPair>& pairs, const Dataset& dataset, const Vocabulary& vocab,
                         int max_len, int min_len) {
    PairDataset out;
    out.reserve(pairs.size());
    for (const auto& pair : pairs) {
        auto pre = feat::encode_window(pair.pre, pair.event.time, dataset, vocab, max_len, min_len);
        auto post = feat::encode_window(pair.post, pair.event.time, dataset, vocab, max_len, min_len);
        if (!pre || !post) continue;
        EncodedPair ep;
        ep.pre = std::move(*pre);
        ep.post = std::move(*post);
        ep.patient_id = pair.event.patient_id;
        ep.event_time = pair.event.time;
        auto it = pair.labels.begin();
        if (it != pair.labels.end()) ep.label = it->second;
        out.push_back(std::move(ep));
    }
    return out;
}

EbclEpochSampler::EbclEpochSampler(const PairDataset& pairs, int batch_size, std::mt19937_64& rng)
    : pairs_(pairs), batch_size_(batch_size) {
    if (batch_size_ < 1) throw std::invalid_argument("EbclEpochSampler: batch_size must be >= 1");
    std::set<std::string> distinct;
    for (const auto& p : pairs_) distinct.insert(p.patient_id);
    if (static_cast<int>(distinct.size()) < batch_size_)
        throw std::invalid_argument("sample_ebcl_batch: need at least " + std::to_string(batch_size_) +
                                    " distinct patients with valid pairs, have " + std::to_string(distinct.size()));
    remaining_.resize(pairs_.size());
    std::iota(remaining_.begin(), remaining_.end(), 0);
    std::shuffle(remaining_.begin(), remaining_.end(), rng);
}

std::optional<ContrastiveBatch> EbclEpochSampler::next() {
    if (static_cast<int>(remaining_.size()) < batch_size_) return std::nullopt;
    ContrastiveBatch batch;
    std::set<std::string> seen;
    std::vector<int> kept;
    kept.reserve(remaining_.size());
    for (int idx : remaining_) {
        if (static_cast<int>(batch.pair_indices.size()) < batch_size_ &&
            seen.insert(pairs_[static_cast<size_t>(idx)].patient_id).second) {
            batch.pair_indices.push_back(idx);
        } else {
            kept.push_back(idx);
        }
    }
    if (static_cast<int>(batch.pair_indices.size()) < batch_size_) return std::nullopt;
    remaining_ = std::move(kept);
    for (int idx : batch.pair_indices) {
        batch.pre.rows.push_back(pairs_[static_cast<size_t>(idx)].pre);
        batch.post.rows.push_back(pairs_[static_cast<size_t>(idx)].post);
    }
    return batch;
}

ContrastiveBatch sample_ebcl_batch(const PairDataset& pairs, int batch_size, std::mt19937_64& rng) {
    EbclEpochSampler sampler(pairs, batch_size, rng);
    auto batch = sampler.next();
    if (!batch) throw std::runtime_error("sample_ebcl_batch: could not assemble a full batch");
    return *batch;
}

double clip_loss(const Matrix& pre_emb, const Matrix& post_emb, double log_temp) {
    const Eigen::Index n = pre_emb.rows();
    if (n == 0) throw std::invalid_argument("clip_loss: empty batch");
    if (post_emb.rows() != n || post_emb.cols() != pre_emb.cols())
        throw std::invalid_argument("clip_loss: shape mismatch");
    const Matrix logits = (pre_emb * post_emb.transpose()) * std::exp(log_temp);

    // CE_i = log sum_j exp(z_ij - m_i) + (m_i - z_ii); exact 0 / ln N in the
    // singleton and all-equal cases.
    double loss_rows = 0.0, loss_cols = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = logits.row(i).maxCoeff();
        const double s = (logits.row(i).array() - m).exp().sum();
        loss_rows += std::log(s) + (m - logits(i, i));
    }
    for (Eigen::Index j = 0; j < n; ++j) {
        const double m = logits.col(j).maxCoeff();
        const double s = (logits.col(j).array() - m).exp().sum();
        loss_cols += std::log(s) + (m - logits(j, j));
    }
    return 0.5 * (loss_rows / static_cast<double>(n) + loss_cols / static_cast<double>(n));
}

Value clip_loss_g(Tape& t, Value pre_emb, Value post_emb, Value log_temp) {
    if (pre_emb.rows() == 0) throw std::invalid_argument("clip_loss: empty batch");
    Value logits = scale_by(t, matmul(t, pre_emb, transpose(t, post_emb)), exp_v(t, log_temp));
    Value diag = diag_vec(t, logits);
    Value ce_rows = mean_all(t, sub(t, logsumexp_rows(t, logits), diag));
    Value ce_cols = mean_all(t, sub(t, logsumexp_rows(t, transpose(t, logits)), diag));
    return scale(t, add(t, ce_rows, ce_cols), 0.5);
}

namespace {

// Observations of a trajectory that survive the vocabulary, in time order.
std::vector<const Observation*> encodable_observations(const PatientTrajectory& traj, const Dataset& dataset,
                                                       const Vocabulary& vocab) {
    std::vector<const Observation*> out;
    out.reserve(traj.obs.size());
    for (const auto& o : traj.obs) {
        const Vocabulary::Feature* f = vocab.find(dataset.feature_name(o.feature_id));
        if (!f) continue;
        if (f->is_cont == o.is_categorical) continue;
        out.push_back(&o);
    }
    return out;
}

}  // namespace

std::vector<feat::RelativeObservation> ocp_relative_times(const std::vector<const Observation*>& block,
                                                          bool swapped) {
    const int n = static_cast<int>(block.size());
    if (n < 2) throw std::invalid_argument("ocp_relative_times: block too short");
    const int m = n / 2;  // first half = [0, m), second = [m, n)
    std::vector<feat::RelativeObservation> items;
    items.reserve(static_cast<size_t>(n));
    const double t_last = block[static_cast<size_t>(n - 1)]->time;
    if (!swapped) {
        for (const auto* o : block) items.push_back({o->time - t_last, o});
    } else {
        const double t_half = block[static_cast<size_t>(m - 1)]->time;
        const double t_gap = t_last - t_half;
        for (int i = m; i < n; ++i)
            items.push_back({block[static_cast<size_t>(i)]->time - t_last, block[static_cast<size_t>(i)]});
        for (int i = 0; i < m; ++i)
            items.push_back({(block[static_cast<size_t>(i)]->time - t_last) + t_gap, block[static_cast<size_t>(i)]});
    }
    return items;
}

std::optional<OcpExample> ocp_make_example(const PatientTrajectory& traj, const Dataset& dataset,
                                           const Vocabulary& vocab, std::mt19937_64& rng, int max_len,
                                           int min_half) {
    auto obs = encodable_observations(traj, dataset, vocab);
    const int total = static_cast<int>(obs.size());
    if (total < 2 * min_half) return std::nullopt;

    const int take = std::min(total, max_len);
    std::uniform_int_distribution<int> start_dist(0, total - take);
    const int start = start_dist(rng);
    std::vector<const Observation*> block(obs.begin() + start, obs.begin() + start + take);

    std::bernoulli_distribution coin(0.5);
    const bool swapped = coin(rng);
    auto items = ocp_relative_times(block, swapped);

    auto row = feat::encode_relative(items, dataset, vocab, max_len, 2 * min_half);
    if (!row) return std::nullopt;
    return OcpExample{std::move(*row), swapped ? 1 : 0};
}

Value ocp_loss_g(Tape& t, Value embeddings, const std::vector<int>& labels, Value head_w, Value head_b) {
    if (labels.empty()) throw std::invalid_argument("ocp_loss: empty batch");
    if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows())
        throw std::invalid_argument("ocp_loss: label count mismatch");
    Value logits = add_rowvec(t, matmul(t, embeddings, head_w), head_b);
    Matrix targets(static_cast<Eigen::Index>(labels.size()), 1);
    for (size_t i = 0; i < labels.size(); ++i) targets(static_cast<Eigen::Index>(i), 0) = labels[i];
    return bce_with_logits_mean(t, logits, targets);
}

std::optional<ForecastExample> strats_example_at(const PatientTrajectory& traj, const Dataset& dataset,
                                                 const Vocabulary& vocab, double w_start, double window_len_days,
                                                 int max_len, int min_input) {
    auto obs = encodable_observations(traj, dataset, vocab);
    const double w_end = w_start + window_len_days;

    // Targets: first observed continuous value per feature inside the window.
    std::map<int, double> targets;
    for (const auto* o : obs) {
        if (o->time < w_start || o->time >= w_end) continue;
        if (o->is_categorical) continue;
        const Vocabulary::Feature* f = vocab.find(dataset.feature_name(o->feature_id));
        if (!targets.count(f->id)) targets[f->id] = (o->cont_value - f->mean) / f->std;
    }
    if (targets.empty()) return std::nullopt;

    std::vector<const Observation*> inputs;
    for (const auto* o : obs)
        if (o->time < w_start) inputs.push_back(o);
    if (static_cast<int>(inputs.size()) < min_input) return std::nullopt;
    if (static_cast<int>(inputs.size()) > max_len) inputs.erase(inputs.begin(), inputs.end() - max_len);

    const double anchor = inputs.back()->time;
    std::vector<feat::RelativeObservation> items;
    items.reserve(inputs.size());
    for (const auto* o : inputs) items.push_back({o->time - anchor, o});
    auto row = feat::encode_relative(items, dataset, vocab, max_len, min_input);
    if (!row) return std::nullopt;

    ForecastExample ex;
    ex.input = std::move(*row);
    ex.targets.assign(targets.begin(), targets.end());
    return ex;
}

std::optional<ForecastExample> strats_make_example(const PatientTrajectory& traj, const Dataset& dataset,
                                                   const Vocabulary& vocab, double window_len_days,
                                                   std::mt19937_64& rng, int max_len, int min_input,
                                                   int max_attempts) {
    auto obs = encodable_observations(traj, dataset, vocab);
    if (static_cast<int>(obs.size()) < min_input + 1) return std::nullopt;
    const double t_min = obs.front()->time;
    const double t_max = obs.back()->time;
    std::uniform_real_distribution<double> start_dist(t_min, t_max);

    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        auto ex = strats_example_at(traj, dataset, vocab, start_dist(rng), window_len_days, max_len, min_input);
        if (ex) return ex;
    }
    return std::nullopt;
}

namespace {

void strats_target_matrices(const std::vector<ForecastExample>& examples, Eigen::Index n_features, Matrix& target,
                            Matrix& mask) {
    const Eigen::Index B = static_cast<Eigen::Index>(examples.size());
    target = Matrix::Zero(B, n_features);
    mask = Matrix::Zero(B, n_features);
    for (Eigen::Index b = 0; b < B; ++b) {
        if (examples[static_cast<size_t>(b)].targets.empty())
            throw std::invalid_argument("strats_loss: example with empty target set");
        for (const auto& [fid, z] : examples[static_cast<size_t>(b)].targets) {
            target(b, fid) = z;
            mask(b, fid) = 1.0;
        }
    }
}

}  // namespace

double strats_loss(const Matrix& preds, const std::vector<ForecastExample>& examples) {
    if (examples.empty()) throw std::invalid_argument("strats_loss: empty batch");
    Matrix target, mask;
    strats_target_matrices(examples, preds.cols(), target, mask);
    const Matrix diff = (preds - target).cwiseProduct(mask);
    return diff.squaredNorm() / mask.sum();
}

Value strats_loss_g(Tape& t, Value preds, const std::vector<ForecastExample>& examples) {
    if (examples.empty()) throw std::invalid_argument("strats_loss: empty batch");
    Matrix target, mask;
    strats_target_matrices(examples, preds.cols(), target, mask);
    return mse_masked(t, preds, target, mask);
}

std::optional<ImputationExample> duett_make_example(const WindowPair& pair, const Dataset& dataset,
                                                    const Vocabulary& vocab, const DuettConfig& cfg,
                                                    std::mt19937_64& rng) {
    // Grid features: the top_k most prevalent vocabulary features.
    std::vector<int> order(static_cast<size_t>(vocab.n_features()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return vocab.features[static_cast<size_t>(a)].count > vocab.features[static_cast<size_t>(b)].count;
    });
    const int n_feat = std::min(cfg.top_k, vocab.n_features());
    std::vector<int> slot(static_cast<size_t>(vocab.n_features()), -1);
    for (int s = 0; s < n_feat; ++s) slot[static_cast<size_t>(order[static_cast<size_t>(s)])] = s;

    std::vector<const Observation*> all;
    for (const auto* side : {&pair.pre, &pair.post})
        for (const auto& o : *side) all.push_back(&o);
    if (all.empty()) return std::nullopt;

    double t_min = all.front()->time, t_max = all.front()->time;
    for (const auto* o : all) {
        t_min = std::min(t_min, o->time);
        t_max = std::max(t_max, o->time);
    }
    const double span = std::max(t_max - t_min, 1e-12);

    ImputationExample ex;
    ex.values = Matrix::Zero(cfg.n_bins, n_feat);
    ex.counts = Matrix::Zero(cfg.n_bins, n_feat);
    Matrix sums = Matrix::Zero(cfg.n_bins, n_feat);
    bool any = false;
    for (const auto* o : all) {
        const Vocabulary::Feature* f = vocab.find(dataset.feature_name(o->feature_id));
        if (!f || f->is_cont == o->is_categorical) continue;
        const int s = slot[static_cast<size_t>(f->id)];
        if (s < 0) continue;
        int bin = static_cast<int>(std::floor((o->time - t_min) / span * cfg.n_bins));
        bin = std::clamp(bin, 0, cfg.n_bins - 1);
        const double v = f->is_cont ? (o->cont_value - f->mean) / f->std : static_cast<double>(o->cat_value);
        sums(bin, s) += v;
        ex.counts(bin, s) += 1.0;
        any = true;
    }
    if (!any) return std::nullopt;

    ex.observed = (ex.counts.array() > 0).cast<double>().matrix();
    ex.values = ((ex.counts.array() > 0).select(sums.array() / ex.counts.array().max(1.0), 0.0)).matrix();

    std::bernoulli_distribution hide(cfg.mask_rate);
    ex.hidden = Matrix::Zero(cfg.n_bins, n_feat);
    for (Eigen::Index r = 0; r < ex.hidden.rows(); ++r)
        for (Eigen::Index c = 0; c < ex.hidden.cols(); ++c) ex.hidden(r, c) = hide(rng) ? 1.0 : 0.0;
    return ex;
}

ParamStore init_duett_params(const DuettConfig& cfg, uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int d = cfg.d_model;
    ParamStore p;
    p.add("cell_w", model::truncated_normal(3, d, 0.02, rng));
    p.add("cell_b", Matrix::Zero(1, d));
    model::add_transformer_params(p, "time.", cfg.n_layers_time, d, cfg.d_ff, rng);
    model::add_transformer_params(p, "feat.", cfg.n_layers_feat, d, cfg.d_ff, rng);
    p.add("pres_w", model::truncated_normal(d, 1, 0.02, rng));
    p.add("pres_b", Matrix::Zero(1, 1));
    p.add("val_w", model::truncated_normal(d, 1, 0.02, rng));
    p.add("val_b", Matrix::Zero(1, 1));
    return p;
}

DuettOutput duett_forward_g(Tape& t, const ImputationExample& ex, const BoundParams& p, const DuettConfig& cfg,
                            bool train_mode, std::mt19937_64* rng) {
    const Eigen::Index n_bins = ex.values.rows();
    const Eigen::Index n_feat = ex.values.cols();
    const Eigen::Index n_cells = n_bins * n_feat;

    // Cell channels in bin-major order: masked value, masked count, hidden flag.
    Matrix channels(n_cells, 3);
    for (Eigen::Index b = 0; b < n_bins; ++b)
        for (Eigen::Index f = 0; f < n_feat; ++f) {
            const Eigen::Index c = b * n_feat + f;
            const double keep = ex.hidden(b, f) > 0 ? 0.0 : 1.0;
            channels(c, 0) = ex.values(b, f) * ex.observed(b, f) * keep;
            channels(c, 1) = ex.counts(b, f) * keep;
            channels(c, 2) = ex.hidden(b, f);
        }

    Value cells = add_rowvec(t, matmul(t, t.input(channels), p.at("cell_w")), p.at("cell_b"));

    // Time axis: each feature's column of bins is one sequence.
    {
        std::vector<Value> columns;
        columns.reserve(static_cast<size_t>(n_feat));
        for (Eigen::Index f = 0; f < n_feat; ++f) {
            std::vector<int> idx;
            idx.reserve(static_cast<size_t>(n_bins));
            for (Eigen::Index b = 0; b < n_bins; ++b) idx.push_back(static_cast<int>(b * n_feat + f));
            Value col = gather_rows(t, cells, idx);
            columns.push_back(
                transformer_stack_g(t, col, p, "time.", cfg.n_layers_time, cfg.n_heads, cfg.dropout, train_mode, rng));
        }
        Value catted = concat_rows(t, columns);  // feature-major: [f*n_bins + b]
        std::vector<int> back;
        back.reserve(static_cast<size_t>(n_cells));
        for (Eigen::Index b = 0; b < n_bins; ++b)
            for (Eigen::Index f = 0; f < n_feat; ++f) back.push_back(static_cast<int>(f * n_bins + b));
        cells = gather_rows(t, catted, back);
    }

    // Feature axis: each bin's row of features is one sequence.
    {
        std::vector<Value> rows;
        rows.reserve(static_cast<size_t>(n_bins));
        for (Eigen::Index b = 0; b < n_bins; ++b) {
            std::vector<int> idx;
            idx.reserve(static_cast<size_t>(n_feat));
            for (Eigen::Index f = 0; f < n_feat; ++f) idx.push_back(static_cast<int>(b * n_feat + f));
            Value row = gather_rows(t, cells, idx);
            rows.push_back(
                transformer_stack_g(t, row, p, "feat.", cfg.n_layers_feat, cfg.n_heads, cfg.dropout, train_mode, rng));
        }
        cells = concat_rows(t, rows);  // back to bin-major
    }

    DuettOutput out;
    out.cells = cells;
    out.presence_logits = add_rowvec(t, matmul(t, cells, p.at("pres_w")), p.at("pres_b"));
    out.values = add_rowvec(t, matmul(t, cells, p.at("val_w")), p.at("val_b"));
    return out;
}

Value duett_loss_g(Tape& t, const DuettOutput& out, const ImputationExample& ex) {
    const Eigen::Index n_bins = ex.values.rows();
    const Eigen::Index n_feat = ex.values.cols();
    std::vector<int> hidden_idx;
    std::vector<int> hidden_obs_idx;
    for (Eigen::Index b = 0; b < n_bins; ++b)
        for (Eigen::Index f = 0; f < n_feat; ++f) {
            if (ex.hidden(b, f) > 0) {
                hidden_idx.push_back(static_cast<int>(b * n_feat + f));
                if (ex.observed(b, f) > 0) hidden_obs_idx.push_back(static_cast<int>(b * n_feat + f));
            }
        }
    if (hidden_idx.empty()) throw std::invalid_argument("duett_loss: no hidden cells");

    Matrix pres_target(static_cast<Eigen::Index>(hidden_idx.size()), 1);
    for (size_t i = 0; i < hidden_idx.size(); ++i) {
        const Eigen::Index c = hidden_idx[i];
        pres_target(static_cast<Eigen::Index>(i), 0) = ex.observed(c / n_feat, c % n_feat);
    }
    Value pres_logits = gather_rows(t, out.presence_logits, hidden_idx);
    Value loss = bce_with_logits_mean(t, pres_logits, pres_target);

    if (!hidden_obs_idx.empty()) {
        Matrix val_target(static_cast<Eigen::Index>(hidden_obs_idx.size()), 1);
        for (size_t i = 0; i < hidden_obs_idx.size(); ++i) {
            const Eigen::Index c = hidden_obs_idx[i];
            val_target(static_cast<Eigen::Index>(i), 0) = ex.values(c / n_feat, c % n_feat);
        }
        Value val_pred = gather_rows(t, out.values, hidden_obs_idx);
        Value mse = mse_masked(t, val_pred, val_target, Matrix::Ones(val_target.rows(), 1));
        loss = add(t, loss, mse);
    }
    return loss;
}

}  // namespace ebcl::objectives
