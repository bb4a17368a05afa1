#include "ebcl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ebcl/evaluation.hpp"

namespace ebcl::training {

namespace fs = std::filesystem;
using model::BoundParams;
using model::EncoderConfig;
using model::ParamStore;
using nlohmann::json;
using nn::Matrix;
using nn::Tape;
using nn::Value;
using objectives::DuettConfig;
using objectives::Objective;
using objectives::PairDataset;

namespace {

constexpr double kMaxTemp = 100.0;

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t x = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::map<std::string, Matrix> collect_grads(const ParamStore& params, const BoundParams& bound) {
    std::map<std::string, Matrix> grads;
    for (const auto& name : params.names()) {
        const nn::Value v = bound.at(name);
        if (v.node->grad_init) grads[name] = v.node->grad;
    }
    return grads;
}

void clamp_log_temp(ParamStore& params) {
    if (!params.has("log_temp")) return;
    double& t = params.at("log_temp")(0, 0);
    t = std::min(t, std::log(kMaxTemp));
}

}  // namespace

void RunConfig::validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("RunConfig: learning_rate must be > 0");
    if (dropout < 0 || dropout > 0.6) throw std::invalid_argument("RunConfig: dropout must be in [0, 0.6]");
    if (batch_size < 1 || max_epochs < 1 || early_stop_tolerance < 1)
        throw std::invalid_argument("RunConfig: batch_size, max_epochs, early_stop_tolerance must be >= 1");
}

void Adam::step(ParamStore& params, const std::map<std::string, Matrix>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        Matrix& p = params.at(name);
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            m_[name] = Matrix::Zero(p.rows(), p.cols());
            v_[name] = Matrix::Zero(p.rows(), p.cols());
            mit = m_.find(name);
        }
        Matrix& m = mit->second;
        Matrix& v = v_[name];
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
        p.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
    }
}

// --- Pretraining trainers ------------------------------------------------------

namespace {

class EbclTrainer : public ObjectiveTrainer {
public:
    EbclTrainer(const TrainingData& data, EncoderConfig cfg, int batch_size)
        : data_(data), cfg_(cfg), batch_size_(batch_size) {
        std::set<std::string> val_patients;
        for (const auto& p : data_.val_pairs) val_patients.insert(p.patient_id);
        val_batch_ = std::min<int>(batch_size_, static_cast<int>(val_patients.size()));
        if (val_batch_ < 2) throw std::invalid_argument("ebcl: validation split needs >= 2 distinct patients");
    }

    ParamStore init_params(uint64_t seed) const override {
        return model::init_encoder_params(cfg_, data_.vocab->n_features(), data_.vocab->n_cat_ids, seed);
    }

    double train_epoch(ParamStore& params, Adam& opt, double dropout, std::mt19937_64& rng) override {
        EncoderConfig cfg = cfg_;
        cfg.dropout = dropout;
        objectives::EbclEpochSampler sampler(data_.train_pairs, batch_size_, rng);
        double total = 0.0;
        int batches = 0;
        while (auto batch = sampler.next()) {
            Tape tape;
            BoundParams bound = bind_params(tape, params, true);
            Value pre = model::encode_batch(tape, batch->pre, bound, cfg, true, &rng);
            Value post = model::encode_batch(tape, batch->post, bound, cfg, true, &rng);
            Value loss = objectives::clip_loss_g(tape, model::project_batch(tape, pre, model::Side::Pre, bound),
                                                 model::project_batch(tape, post, model::Side::Post, bound),
                                                 bound.at("log_temp"));
            tape.backward(loss);
            opt.step(params, collect_grads(params, bound));
            clamp_log_temp(params);
            total += loss.item();
            ++batches;
        }
        if (batches == 0) throw std::runtime_error("ebcl: no full training batch could be formed");
        return total / batches;
    }

    double validation_loss(const ParamStore& params) const override {
        std::mt19937_64 rng(mix_seed(0xE8C1u, 0));
        objectives::EbclEpochSampler sampler(data_.val_pairs, val_batch_, rng);
        double total = 0.0;
        int batches = 0;
        while (auto batch = sampler.next()) {
            Tape tape;
            BoundParams bound = bind_params(tape, params, false);
            Value pre = model::encode_batch(tape, batch->pre, bound, cfg_, false, nullptr);
            Value post = model::encode_batch(tape, batch->post, bound, cfg_, false, nullptr);
            Value loss = objectives::clip_loss_g(tape, model::project_batch(tape, pre, model::Side::Pre, bound),
                                                 model::project_batch(tape, post, model::Side::Post, bound),
                                                 bound.at("log_temp"));
            total += loss.item();
            ++batches;
        }
        return batches > 0 ? total / batches : std::numeric_limits<double>::infinity();
    }

private:
    const TrainingData& data_;
    EncoderConfig cfg_;
    int batch_size_;
    int val_batch_;
};

class OcpTrainer : public ObjectiveTrainer {
public:
    OcpTrainer(const TrainingData& data, EncoderConfig cfg, int batch_size)
        : data_(data), cfg_(cfg), batch_size_(batch_size) {
        std::mt19937_64 rng(mix_seed(0x0C9u, 1));
        for (const auto* traj : data_.val_trajs) {
            auto ex = objectives::ocp_make_example(*traj, *data_.dataset, *data_.vocab, rng, cfg_.max_len);
            if (ex) val_examples_.push_back(std::move(*ex));
        }
        if (val_examples_.empty()) throw std::invalid_argument("ocp: no usable validation trajectories");
    }

    ParamStore init_params(uint64_t seed) const override {
        ParamStore p = model::init_encoder_params(cfg_, data_.vocab->n_features(), data_.vocab->n_cat_ids, seed);
        std::mt19937_64 rng(mix_seed(seed, 0x0C9u));
        p.add("ocp_w", model::truncated_normal(cfg_.d_embed, 1, 0.02, rng));
        p.add("ocp_b", Matrix::Zero(1, 1));
        return p;
    }

    double train_epoch(ParamStore& params, Adam& opt, double dropout, std::mt19937_64& rng) override {
        EncoderConfig cfg = cfg_;
        cfg.dropout = dropout;
        std::vector<objectives::OcpExample> examples;
        for (const auto* traj : data_.train_trajs) {
            auto ex = objectives::ocp_make_example(*traj, *data_.dataset, *data_.vocab, rng, cfg_.max_len);
            if (ex) examples.push_back(std::move(*ex));
        }
        if (examples.empty()) throw std::runtime_error("ocp: no usable training trajectories");
        std::shuffle(examples.begin(), examples.end(), rng);

        double total = 0.0;
        int batches = 0;
        for (size_t at = 0; at < examples.size(); at += static_cast<size_t>(batch_size_)) {
            const size_t end = std::min(examples.size(), at + static_cast<size_t>(batch_size_));
            feat::TokenBatch batch;
            std::vector<int> labels;
            for (size_t i = at; i < end; ++i) {
                batch.rows.push_back(examples[i].tokens);
                labels.push_back(examples[i].label);
            }
            Tape tape;
            BoundParams bound = bind_params(tape, params, true);
            Value emb = model::encode_batch(tape, batch, bound, cfg, true, &rng);
            Value loss = objectives::ocp_loss_g(tape, emb, labels, bound.at("ocp_w"), bound.at("ocp_b"));
            tape.backward(loss);
            opt.step(params, collect_grads(params, bound));
            total += loss.item();
            ++batches;
        }
        return total / batches;
    }

    double validation_loss(const ParamStore& params) const override {
        Tape tape;
        BoundParams bound = bind_params(tape, params, false);
        feat::TokenBatch batch;
        std::vector<int> labels;
        for (const auto& ex : val_examples_) {
            batch.rows.push_back(ex.tokens);
            labels.push_back(ex.label);
        }
        Value emb = model::encode_batch(tape, batch, bound, cfg_, false, nullptr);
        return objectives::ocp_loss_g(tape, emb, labels, bound.at("ocp_w"), bound.at("ocp_b")).item();
    }

    const std::vector<objectives::OcpExample>& val_examples() const { return val_examples_; }

private:
    const TrainingData& data_;
    EncoderConfig cfg_;
    int batch_size_;
    std::vector<objectives::OcpExample> val_examples_;
};

class StratsTrainer : public ObjectiveTrainer {
public:
    StratsTrainer(const TrainingData& data, EncoderConfig cfg, int batch_size)
        : data_(data), cfg_(cfg), batch_size_(batch_size) {
        std::mt19937_64 rng(mix_seed(0x57A7u, 2));
        for (const auto* traj : data_.val_trajs) {
            auto ex = objectives::strats_make_example(*traj, *data_.dataset, *data_.vocab, data_.strats_window_days,
                                                      rng, cfg_.max_len);
            if (ex) val_examples_.push_back(std::move(*ex));
        }
        if (val_examples_.empty()) throw std::invalid_argument("strats: no usable validation trajectories");
    }

    ParamStore init_params(uint64_t seed) const override {
        ParamStore p = model::init_encoder_params(cfg_, data_.vocab->n_features(), data_.vocab->n_cat_ids, seed);
        std::mt19937_64 rng(mix_seed(seed, 0x57A7u));
        p.add("strats_w", model::truncated_normal(cfg_.d_embed, data_.vocab->n_features(), 0.02, rng));
        p.add("strats_b", Matrix::Zero(1, data_.vocab->n_features()));
        return p;
    }

    double train_epoch(ParamStore& params, Adam& opt, double dropout, std::mt19937_64& rng) override {
        EncoderConfig cfg = cfg_;
        cfg.dropout = dropout;
        std::vector<objectives::ForecastExample> examples;
        for (const auto* traj : data_.train_trajs) {
            auto ex = objectives::strats_make_example(*traj, *data_.dataset, *data_.vocab, data_.strats_window_days,
                                                      rng, cfg_.max_len);
            if (ex) examples.push_back(std::move(*ex));
        }
        if (examples.empty()) throw std::runtime_error("strats: no usable training trajectories");
        std::shuffle(examples.begin(), examples.end(), rng);

        double total = 0.0;
        int batches = 0;
        for (size_t at = 0; at < examples.size(); at += static_cast<size_t>(batch_size_)) {
            const size_t end = std::min(examples.size(), at + static_cast<size_t>(batch_size_));
            std::vector<objectives::ForecastExample> chunk(examples.begin() + static_cast<ptrdiff_t>(at),
                                                           examples.begin() + static_cast<ptrdiff_t>(end));
            feat::TokenBatch batch;
            for (const auto& ex : chunk) batch.rows.push_back(ex.input);
            Tape tape;
            BoundParams bound = bind_params(tape, params, true);
            Value emb = model::encode_batch(tape, batch, bound, cfg, true, &rng);
            Value preds = add_rowvec(tape, matmul(tape, emb, bound.at("strats_w")), bound.at("strats_b"));
            Value loss = objectives::strats_loss_g(tape, preds, chunk);
            tape.backward(loss);
            opt.step(params, collect_grads(params, bound));
            total += loss.item();
            ++batches;
        }
        return total / batches;
    }

    double validation_loss(const ParamStore& params) const override {
        Tape tape;
        BoundParams bound = bind_params(tape, params, false);
        feat::TokenBatch batch;
        for (const auto& ex : val_examples_) batch.rows.push_back(ex.input);
        Value emb = model::encode_batch(tape, batch, bound, cfg_, false, nullptr);
        Value preds = add_rowvec(tape, matmul(tape, emb, bound.at("strats_w")), bound.at("strats_b"));
        return objectives::strats_loss_g(tape, preds, val_examples_).item();
    }

private:
    const TrainingData& data_;
    EncoderConfig cfg_;
    int batch_size_;
    std::vector<objectives::ForecastExample> val_examples_;
};

class DuettTrainer : public ObjectiveTrainer {
public:
    DuettTrainer(const TrainingData& data, DuettConfig cfg, int batch_size)
        : data_(data), cfg_(cfg), batch_size_(batch_size) {
        std::mt19937_64 rng(mix_seed(0xD0E77u, 3));
        for (const auto& pair : data_.val_raw_pairs) {
            auto ex = objectives::duett_make_example(pair, *data_.dataset, *data_.vocab, cfg_, rng);
            if (ex) val_examples_.push_back(std::move(*ex));
        }
        if (val_examples_.empty()) throw std::invalid_argument("duett: no usable validation pairs");
    }

    ParamStore init_params(uint64_t seed) const override { return objectives::init_duett_params(cfg_, seed); }

    double train_epoch(ParamStore& params, Adam& opt, double dropout, std::mt19937_64& rng) override {
        DuettConfig cfg = cfg_;
        cfg.dropout = dropout;
        std::vector<size_t> order(data_.train_raw_pairs.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double total = 0.0;
        int batches = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size_)) {
            const size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size_));
            std::vector<objectives::ImputationExample> chunk;
            for (size_t i = at; i < end; ++i) {
                auto ex = objectives::duett_make_example(data_.train_raw_pairs[order[i]], *data_.dataset,
                                                         *data_.vocab, cfg_, rng);
                if (ex) chunk.push_back(std::move(*ex));
            }
            if (chunk.empty()) continue;
            Tape tape;
            BoundParams bound = bind_params(tape, params, true);
            Value loss{};
            for (const auto& ex : chunk) {
                auto out = objectives::duett_forward_g(tape, ex, bound, cfg, true, &rng);
                Value l = objectives::duett_loss_g(tape, out, ex);
                loss = loss.node ? add(tape, loss, l) : l;
            }
            loss = scale(tape, loss, 1.0 / static_cast<double>(chunk.size()));
            tape.backward(loss);
            opt.step(params, collect_grads(params, bound));
            total += loss.item();
            ++batches;
        }
        if (batches == 0) throw std::runtime_error("duett: no usable training pairs");
        return total / batches;
    }

    double validation_loss(const ParamStore& params) const override {
        Tape tape;
        BoundParams bound = bind_params(tape, params, false);
        Value loss{};
        for (const auto& ex : val_examples_) {
            auto out = objectives::duett_forward_g(tape, ex, bound, cfg_, false, nullptr);
            Value l = objectives::duett_loss_g(tape, out, ex);
            loss = loss.node ? add(tape, loss, l) : l;
        }
        return loss.item() / static_cast<double>(val_examples_.size());
    }

private:
    const TrainingData& data_;
    DuettConfig cfg_;
    int batch_size_;
    std::vector<objectives::ImputationExample> val_examples_;
};

}  // namespace

std::unique_ptr<ObjectiveTrainer> make_pretrain_trainer(Objective objective, const TrainingData& data,
                                                        const EncoderConfig& encoder_config,
                                                        const DuettConfig& duett_config, int batch_size) {
    if (!data.dataset || !data.vocab) throw std::invalid_argument("make_pretrain_trainer: data not bound");
    switch (objective) {
        case Objective::Ebcl: return std::make_unique<EbclTrainer>(data, encoder_config, batch_size);
        case Objective::Ocp: return std::make_unique<OcpTrainer>(data, encoder_config, batch_size);
        case Objective::Strats: return std::make_unique<StratsTrainer>(data, encoder_config, batch_size);
        case Objective::Duett: return std::make_unique<DuettTrainer>(data, duett_config, batch_size);
    }
    throw std::invalid_argument("make_pretrain_trainer: unknown objective");
}

TrainResult pretrain(const RunConfig& run, ObjectiveTrainer& trainer) {
    run.validate();
    ParamStore params = trainer.init_params(run.seed);
    if (!run.init_checkpoint.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(run.init_checkpoint);
        validate_params_match(loaded.params, params);
        params = std::move(loaded.params);
    }
    Adam opt(run.learning_rate);
    std::mt19937_64 rng(mix_seed(run.seed, 0x7EA1Au));

    TrainResult result;
    result.provenance.objective = run.objective;
    result.provenance.seed = run.seed;
    double best_val = std::numeric_limits<double>::infinity();
    int strikes = 0;
    for (int epoch = 1; epoch <= run.max_epochs; ++epoch) {
        const double train_loss = trainer.train_epoch(params, opt, run.dropout, rng);
        if (!std::isfinite(train_loss))
            throw std::runtime_error("pretrain: diverged (non-finite train loss) at epoch " + std::to_string(epoch));
        const double val = trainer.validation_loss(params);
        if (!std::isfinite(val))
            throw std::runtime_error("pretrain: diverged (non-finite validation loss) at epoch " +
                                     std::to_string(epoch));
        result.provenance.val_trace.push_back(val);
        if (val < best_val) {
            best_val = val;
            result.params = params;
            result.provenance.best_epoch = epoch;
            strikes = 0;
        } else {
            ++strikes;
        }
        if (strikes >= run.early_stop_tolerance) break;
    }
    result.provenance.best_val = best_val;
    return result;
}

double ebcl_retrieval_top1(const ParamStore& params, const EncoderConfig& config, const PairDataset& pairs,
                           int batch_size, uint64_t seed) {
    std::mt19937_64 rng(seed);
    objectives::EbclEpochSampler sampler(pairs, batch_size, rng);
    long correct = 0, total = 0;
    while (auto batch = sampler.next()) {
        Tape tape;
        BoundParams bound = bind_params(tape, params, false);
        Value pre = model::encode_batch(tape, batch->pre, bound, config, false, nullptr);
        Value post = model::encode_batch(tape, batch->post, bound, config, false, nullptr);
        Matrix p = model::project_batch(tape, pre, model::Side::Pre, bound).val();
        Matrix q = model::project_batch(tape, post, model::Side::Post, bound).val();
        Matrix sim = p * q.transpose();
        for (Eigen::Index i = 0; i < sim.rows(); ++i) {
            Eigen::Index argmax;
            sim.row(i).maxCoeff(&argmax);
            correct += (argmax == i);
            ++total;
        }
    }
    if (total == 0) throw std::runtime_error("ebcl_retrieval_top1: no batches");
    return static_cast<double>(correct) / static_cast<double>(total);
}

double ocp_accuracy(const ParamStore& params, const EncoderConfig& config,
                    const std::vector<objectives::OcpExample>& examples) {
    if (examples.empty()) throw std::invalid_argument("ocp_accuracy: no examples");
    feat::TokenBatch batch;
    for (const auto& ex : examples) batch.rows.push_back(ex.tokens);
    Matrix emb = model::encode(batch, params, config);
    const Matrix logits =
        (emb * params.at("ocp_w")).rowwise() + Eigen::RowVectorXd::Constant(1, params.at("ocp_b")(0, 0));
    long correct = 0;
    for (size_t i = 0; i < examples.size(); ++i)
        correct += ((logits(static_cast<Eigen::Index>(i), 0) > 0) == (examples[i].label == 1));
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// --- Finetuning -----------------------------------------------------------------

namespace {

Value finetune_logits(Tape& tape, const PairDataset& pairs, const std::vector<size_t>& idx,
                      const BoundParams& bound, const EncoderConfig& cfg, events::InputMode mode, bool train_mode,
                      std::mt19937_64* rng) {
    feat::TokenBatch pre, post;
    for (size_t i : idx) {
        if (mode != events::InputMode::PostOnly) pre.rows.push_back(pairs[i].pre);
        if (mode != events::InputMode::PreOnly) post.rows.push_back(pairs[i].post);
    }
    Value features{};
    if (mode == events::InputMode::Both) {
        Value e_pre = model::encode_batch(tape, pre, bound, cfg, train_mode, rng);
        Value e_post = model::encode_batch(tape, post, bound, cfg, train_mode, rng);
        features = concat_cols(tape, e_pre, e_post);
    } else if (mode == events::InputMode::PreOnly) {
        features = model::encode_batch(tape, pre, bound, cfg, train_mode, rng);
    } else {
        features = model::encode_batch(tape, post, bound, cfg, train_mode, rng);
    }
    Value hidden = gelu(tape, add_rowvec(tape, matmul(tape, features, bound.at("ft_w1")), bound.at("ft_b1")));
    return add_rowvec(tape, matmul(tape, hidden, bound.at("ft_w2")), bound.at("ft_b2"));
}

}  // namespace

std::vector<double> finetune_scores(const ParamStore& params, const EncoderConfig& config, const PairDataset& pairs,
                                    events::InputMode mode, int batch_size) {
    std::vector<double> out;
    out.reserve(pairs.size());
    for (size_t at = 0; at < pairs.size(); at += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(pairs.size(), at + static_cast<size_t>(batch_size));
        std::vector<size_t> idx(end - at);
        std::iota(idx.begin(), idx.end(), at);
        Tape tape;
        BoundParams bound = bind_params(tape, params, false);
        Value logits = finetune_logits(tape, pairs, idx, bound, config, mode, false, nullptr);
        for (Eigen::Index r = 0; r < logits.rows(); ++r)
            out.push_back(1.0 / (1.0 + std::exp(-logits.val()(r, 0))));
    }
    return out;
}

FinetuneResult finetune(const RunConfig& run, const EncoderConfig& config, const FinetuneData& data,
                        const ParamStore* init_params, int n_features, int n_cat_ids) {
    run.validate();
    bool has_pos = false, has_neg = false;
    for (const auto& p : data.train) {
        if (p.label == 1) has_pos = true;
        else if (p.label == 0) has_neg = true;
    }
    if (!has_pos || !has_neg)
        throw std::invalid_argument("finetune: training labels are single-class for task '" + run.objective + "'");

    ParamStore params;
    if (init_params) {
        params = *init_params;
    } else {
        params = model::init_encoder_params(config, n_features, n_cat_ids, run.seed);
    }
    const int in_dim = data.mode == events::InputMode::Both ? 2 * config.d_embed : config.d_embed;
    std::mt19937_64 head_rng(mix_seed(run.seed, 0xF17Eu));
    if (!params.has("ft_w1")) {
        params.add("ft_w1", model::truncated_normal(in_dim, config.d_embed, 0.02, head_rng));
        params.add("ft_b1", Matrix::Zero(1, config.d_embed));
        params.add("ft_w2", model::truncated_normal(config.d_embed, 1, 0.02, head_rng));
        params.add("ft_b2", Matrix::Zero(1, 1));
    }

    std::vector<int> val_labels, test_labels;
    for (const auto& p : data.val) val_labels.push_back(p.label);
    for (const auto& p : data.test) test_labels.push_back(p.label);

    Adam opt(run.learning_rate);
    std::mt19937_64 rng(mix_seed(run.seed, 0xF17E2u));
    EncoderConfig train_cfg = config;
    train_cfg.dropout = run.dropout;

    FinetuneResult result;
    result.provenance.objective = run.objective;
    result.provenance.seed = run.seed;
    double best_val = -1.0;
    int strikes = 0;
    std::vector<size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= run.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(run.batch_size)) {
            const size_t end = std::min(order.size(), at + static_cast<size_t>(run.batch_size));
            std::vector<size_t> idx(order.begin() + static_cast<ptrdiff_t>(at),
                                    order.begin() + static_cast<ptrdiff_t>(end));
            Matrix targets(static_cast<Eigen::Index>(idx.size()), 1);
            for (size_t i = 0; i < idx.size(); ++i) targets(static_cast<Eigen::Index>(i), 0) = data.train[idx[i]].label;
            Tape tape;
            BoundParams bound = bind_params(tape, params, true);
            Value logits = finetune_logits(tape, data.train, idx, bound, train_cfg, data.mode, true, &rng);
            Value loss = bce_with_logits_mean(tape, logits, targets);
            if (!std::isfinite(loss.item()))
                throw std::runtime_error("finetune: diverged at epoch " + std::to_string(epoch));
            tape.backward(loss);
            opt.step(params, collect_grads(params, bound));
            clamp_log_temp(params);
        }
        const std::vector<double> val_scores = finetune_scores(params, config, data.val, data.mode, run.batch_size);
        const double val_auroc = eval::auroc(val_scores, val_labels);
        result.provenance.val_trace.push_back(val_auroc);
        if (val_auroc > best_val) {
            best_val = val_auroc;
            result.params = params;
            result.provenance.best_epoch = epoch;
            strikes = 0;
        } else {
            ++strikes;
        }
        if (strikes >= run.early_stop_tolerance) break;
    }
    result.provenance.best_val = best_val;
    result.val_auroc = best_val;
    result.test_scores = finetune_scores(result.params, config, data.test, data.mode, run.batch_size);
    result.test_labels = test_labels;
    result.test_auroc = eval::auroc(result.test_scores, test_labels);
    result.test_auprc = eval::auprc(result.test_scores, test_labels);
    return result;
}

// --- Hyperparameter search --------------------------------------------------------

SearchResult hyperparameter_search(const SearchSpec& spec, TrialRunner& runner, const RunConfig& base) {
    if (spec.n_trials < 1) throw std::invalid_argument("hyperparameter_search: n_trials must be >= 1");
    if (spec.reduction_factor < 2) throw std::invalid_argument("hyperparameter_search: reduction_factor must be >= 2");
    if (spec.grace_period < 1) throw std::invalid_argument("hyperparameter_search: grace_period must be >= 1");

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> log_lr(std::log(spec.lr_low), std::log(spec.lr_high));
    std::uniform_real_distribution<double> drop(spec.dropout_low, spec.dropout_high);

    std::vector<TrialRecord> table(static_cast<size_t>(spec.n_trials));
    for (int i = 0; i < spec.n_trials; ++i) {
        table[static_cast<size_t>(i)].trial_id = i;
        table[static_cast<size_t>(i)].lr = std::exp(log_lr(rng));
        table[static_cast<size_t>(i)].dropout = drop(rng);
        table[static_cast<size_t>(i)].best_val = std::numeric_limits<double>::infinity();
        runner.ensure_trial(i, table[static_cast<size_t>(i)].lr, table[static_cast<size_t>(i)].dropout);
    }

    std::vector<int> alive(static_cast<size_t>(spec.n_trials));
    std::iota(alive.begin(), alive.end(), 0);
    std::vector<double> last_val(static_cast<size_t>(spec.n_trials), std::numeric_limits<double>::infinity());

    int rung_epoch = spec.grace_period;
    while (!alive.empty() && rung_epoch <= spec.max_epochs) {
        for (int id : alive) {
            double v = runner.run_to_epoch(id, rung_epoch);
            if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
            last_val[static_cast<size_t>(id)] = v;
            table[static_cast<size_t>(id)].epochs_run = rung_epoch;
            table[static_cast<size_t>(id)].best_val = std::min(table[static_cast<size_t>(id)].best_val, v);
        }
        if (alive.size() == 1) break;
        std::sort(alive.begin(), alive.end(), [&](int a, int b) {
            if (last_val[static_cast<size_t>(a)] != last_val[static_cast<size_t>(b)])
                return last_val[static_cast<size_t>(a)] < last_val[static_cast<size_t>(b)];
            return a < b;
        });
        const size_t keep = std::max<size_t>(1, alive.size() / static_cast<size_t>(spec.reduction_factor));
        alive.resize(keep);
        for (int id : alive) table[static_cast<size_t>(id)].promoted_rungs++;
        rung_epoch *= spec.reduction_factor;
    }

    int best_trial = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int id : alive) {
        if (last_val[static_cast<size_t>(id)] < best) {
            best = last_val[static_cast<size_t>(id)];
            best_trial = id;
        }
    }
    if (best_trial < 0) {
        // Every survivor diverged; fall back to the best recorded value.
        for (const auto& rec : table)
            if (rec.best_val < best) {
                best = rec.best_val;
                best_trial = rec.trial_id;
            }
    }
    if (best_trial < 0) best_trial = 0;

    SearchResult out;
    out.best = base;
    out.best.learning_rate = table[static_cast<size_t>(best_trial)].lr;
    out.best.dropout = table[static_cast<size_t>(best_trial)].dropout;
    out.best_trial = best_trial;
    out.table = std::move(table);
    return out;
}

struct PretrainTrialRunner::Trial {
    std::unique_ptr<ObjectiveTrainer> trainer;
    ParamStore params;
    std::unique_ptr<Adam> opt;
    std::mt19937_64 rng;
    double dropout = 0.0;
    int epochs_done = 0;
    bool dead = false;
};

PretrainTrialRunner::~PretrainTrialRunner() = default;

PretrainTrialRunner::PretrainTrialRunner(Objective objective, const TrainingData& data,
                                         const EncoderConfig& encoder_config, const DuettConfig& duett_config,
                                         const RunConfig& base)
    : objective_(objective), data_(data), encoder_config_(encoder_config), duett_config_(duett_config), base_(base) {}

void PretrainTrialRunner::ensure_trial(int trial_id, double lr, double dropout) {
    if (trial_id != static_cast<int>(trials_.size()))
        throw std::invalid_argument("PretrainTrialRunner: trials must be created in order");
    auto trial = std::make_unique<Trial>();
    trial->trainer = make_pretrain_trainer(objective_, data_, encoder_config_, duett_config_, base_.batch_size);
    trial->params = trial->trainer->init_params(mix_seed(base_.seed, static_cast<uint64_t>(trial_id)));
    trial->opt = std::make_unique<Adam>(lr);
    trial->rng.seed(mix_seed(base_.seed, 0x7121A1u + static_cast<uint64_t>(trial_id)));
    trial->dropout = dropout;
    trials_.push_back(std::move(trial));
}

double PretrainTrialRunner::run_to_epoch(int trial_id, int epoch) {
    Trial& trial = *trials_.at(static_cast<size_t>(trial_id));
    if (trial.dead) return std::numeric_limits<double>::infinity();
    try {
        while (trial.epochs_done < epoch) {
            const double loss = trial.trainer->train_epoch(trial.params, *trial.opt, trial.dropout, trial.rng);
            trial.epochs_done++;
            if (!std::isfinite(loss)) {
                trial.dead = true;
                return std::numeric_limits<double>::infinity();
            }
        }
        const double val = trial.trainer->validation_loss(trial.params);
        if (!std::isfinite(val)) {
            trial.dead = true;
            return std::numeric_limits<double>::infinity();
        }
        return val;
    } catch (const std::exception&) {
        trial.dead = true;
        return std::numeric_limits<double>::infinity();
    }
}

std::string trial_table_csv(const std::vector<TrialRecord>& table) {
    std::ostringstream out;
    out << "trial_id,lr,dropout,epochs_run,best_val,promoted_rungs\n";
    for (const auto& r : table) {
        out << r.trial_id << "," << r.lr << "," << r.dropout << "," << r.epochs_run << "," << r.best_val << ","
            << r.promoted_rungs << "\n";
    }
    return out.str();
}

// --- Checkpoints --------------------------------------------------------------------

void save_checkpoint(const std::string& dir, const ParamStore& params, const std::string& config_json,
                     const std::string& vocab_json, const Provenance& provenance) {
    const fs::path target(dir);
    const fs::path tmp = target.string() + ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);

    json manifest;
    manifest["format"] = "float32-le";
    json tensors = json::array();
    {
        std::ofstream bin(tmp / "params.bin", std::ios::binary);
        if (!bin) throw std::runtime_error("save_checkpoint: cannot write params.bin");
        size_t offset = 0;
        for (const auto& name : params.names()) {
            const Matrix& m = params.at(name);
            json jt;
            jt["name"] = name;
            jt["rows"] = m.rows();
            jt["cols"] = m.cols();
            jt["offset"] = offset;
            tensors.push_back(std::move(jt));
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    const float f = static_cast<float>(m(r, c));
                    bin.write(reinterpret_cast<const char*>(&f), sizeof(float));
                    offset += sizeof(float);
                }
        }
    }
    manifest["tensors"] = std::move(tensors);
    manifest["provenance"] = {{"objective", provenance.objective},
                              {"seed", provenance.seed},
                              {"best_epoch", provenance.best_epoch},
                              {"best_val", provenance.best_val},
                              {"val_trace", provenance.val_trace}};
    {
        std::ofstream out(tmp / "manifest.json");
        out << manifest.dump(2) << "\n";
    }
    {
        std::ofstream out(tmp / "config.json");
        out << config_json << "\n";
    }
    {
        std::ofstream out(tmp / "vocab.json");
        out << vocab_json << "\n";
    }
    fs::remove_all(target);
    fs::rename(tmp, target);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw std::runtime_error("load_checkpoint: missing manifest.json in " + dir);
    json manifest = json::parse(mf);

    LoadedCheckpoint out;
    std::ifstream bin(root / "params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_checkpoint: missing params.bin in " + dir);
    for (const auto& jt : manifest.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        const Eigen::Index rows = jt.at("rows").get<Eigen::Index>();
        const Eigen::Index cols = jt.at("cols").get<Eigen::Index>();
        const size_t offset = jt.at("offset").get<size_t>();
        bin.seekg(static_cast<std::streamoff>(offset));
        Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) {
                float f;
                bin.read(reinterpret_cast<char*>(&f), sizeof(float));
                if (!bin) throw std::runtime_error("load_checkpoint: truncated params.bin at tensor '" + name + "'");
                m(r, c) = static_cast<double>(f);
            }
        out.params.add(name, std::move(m));
    }
    const auto& prov = manifest.at("provenance");
    out.provenance.objective = prov.at("objective").get<std::string>();
    out.provenance.seed = prov.at("seed").get<uint64_t>();
    out.provenance.best_epoch = prov.at("best_epoch").get<int>();
    out.provenance.best_val = prov.at("best_val").get<double>();
    out.provenance.val_trace = prov.at("val_trace").get<std::vector<double>>();

    auto slurp = [&](const fs::path& p) {
        std::ifstream in(p);
        if (!in) throw std::runtime_error("load_checkpoint: missing " + p.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    out.config_json = slurp(root / "config.json");
    out.vocab_json = slurp(root / "vocab.json");
    return out;
}

void validate_params_match(const ParamStore& loaded, const ParamStore& reference) {
    std::vector<std::string> missing, mismatched, extra;
    for (const auto& name : reference.names()) {
        if (!loaded.has(name)) {
            missing.push_back(name);
        } else {
            const Matrix& a = loaded.at(name);
            const Matrix& b = reference.at(name);
            if (a.rows() != b.rows() || a.cols() != b.cols())
                mismatched.push_back(name + " (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
        }
    }
    for (const auto& name : loaded.names())
        if (!reference.has(name)) extra.push_back(name);

    if (missing.empty() && mismatched.empty() && extra.empty()) return;
    std::string msg = "checkpoint does not match the expected configuration:";
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : " ") + v[i];
        return s;
    };
    if (!missing.empty()) msg += " missing tensors:" + join(missing) + ";";
    if (!mismatched.empty()) msg += " shape mismatches:" + join(mismatched) + ";";
    if (!extra.empty()) msg += " unexpected tensors:" + join(extra) + ";";
    throw std::runtime_error(msg);
}

}  // namespace ebcl::training
