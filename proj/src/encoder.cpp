#include "ebcl/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace ebcl::model {

using nn::Matrix;
using nn::Tape;
using nn::Value;

void EncoderConfig::validate() const {
    if (d_token <= 0 || n_layers <= 0 || d_ff <= 0 || n_heads <= 0 || max_len <= 0 || d_embed <= 0)
        throw std::invalid_argument("EncoderConfig: dimensions must be positive");
    if (d_token % n_heads != 0) throw std::invalid_argument("EncoderConfig: d_token must be divisible by n_heads");
    if (dropout < 0.0 || dropout > 0.6) throw std::invalid_argument("EncoderConfig: dropout must be in [0, 0.6]");
}

Matrix& ParamStore::add(const std::string& name, Matrix value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate tensor '" + name + "'");
    names_.push_back(name);
    index_[name] = true;
    return tensors_[name] = std::move(value);
}

Matrix& ParamStore::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("ParamStore: missing tensor '" + name + "'");
    return it->second;
}

const Matrix& ParamStore::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("ParamStore: missing tensor '" + name + "'");
    return it->second;
}

size_t ParamStore::total_elements() const {
    size_t n = 0;
    for (const auto& name : names_) n += static_cast<size_t>(at(name).size());
    return n;
}

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, sigma);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            double v = dist(rng);
            while (std::abs(v) > 2.0 * sigma) v = dist(rng);
            m(r, c) = v;
        }
    return m;
}

void add_transformer_params(ParamStore& p, const std::string& prefix, int n_layers, int d_model, int d_ff,
                            std::mt19937_64& rng) {
    const double sigma = 0.02;
    auto tn = [&](Eigen::Index r, Eigen::Index c) { return truncated_normal(r, c, sigma, rng); };
    for (int l = 0; l < n_layers; ++l) {
        const std::string pre = prefix + "layer" + std::to_string(l) + ".";
        p.add(pre + "wq", tn(d_model, d_model));
        p.add(pre + "bq", Matrix::Zero(1, d_model));
        p.add(pre + "wk", tn(d_model, d_model));
        p.add(pre + "bk", Matrix::Zero(1, d_model));
        p.add(pre + "wv", tn(d_model, d_model));
        p.add(pre + "bv", Matrix::Zero(1, d_model));
        p.add(pre + "wo", tn(d_model, d_model));
        p.add(pre + "bo", Matrix::Zero(1, d_model));
        p.add(pre + "ln1_g", Matrix::Ones(1, d_model));
        p.add(pre + "ln1_b", Matrix::Zero(1, d_model));
        p.add(pre + "ffn_w1", tn(d_model, d_ff));
        p.add(pre + "ffn_b1", Matrix::Zero(1, d_ff));
        p.add(pre + "ffn_w2", tn(d_ff, d_model));
        p.add(pre + "ffn_b2", Matrix::Zero(1, d_model));
        p.add(pre + "ln2_g", Matrix::Ones(1, d_model));
        p.add(pre + "ln2_b", Matrix::Zero(1, d_model));
    }
}

ParamStore init_encoder_params(const EncoderConfig& cfg, int n_features, int n_cat_ids, uint64_t seed) {
    cfg.validate();
    if (n_features <= 0 || n_cat_ids <= 0)
        throw std::invalid_argument("init_encoder_params: vocabulary must be non-empty");
    std::mt19937_64 rng(seed);
    const double sigma = 0.02;
    const int D = cfg.d_token, F = cfg.d_ff, E = cfg.d_embed;

    ParamStore p;
    auto tn = [&](Eigen::Index r, Eigen::Index c) { return truncated_normal(r, c, sigma, rng); };

    // one-to-many embedders for scalar time and continuous value
    p.add("time_w1", tn(1, D));
    p.add("time_b1", Matrix::Zero(1, D));
    p.add("time_w2", tn(D, D));
    p.add("val_w1", tn(1, D));
    p.add("val_b1", Matrix::Zero(1, D));
    p.add("val_w2", tn(D, D));
    p.add("feat_table", tn(n_features, D));
    p.add("cat_table", tn(n_cat_ids, D));

    add_transformer_params(p, "", cfg.n_layers, D, F, rng);

    p.add("fusion_w", tn(D, D));
    p.add("fusion_b", Matrix::Zero(1, D));
    p.add("fusion_v", tn(D, 1));
    p.add("pool_w", tn(D, E));
    p.add("pool_b", Matrix::Zero(1, E));
    p.add("proj_pre", tn(E, E));
    p.add("proj_post", tn(E, E));
    p.add("log_temp", Matrix::Constant(1, 1, std::log(1.0 / 0.07)));
    return p;
}

Value BoundParams::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::out_of_range("BoundParams: missing tensor '" + name + "'");
    return it->second;
}

BoundParams bind_params(Tape& tape, const ParamStore& params, bool trainable) {
    BoundParams bound;
    for (const auto& name : params.names()) {
        bound.values[name] = trainable ? tape.param(params.at(name)) : tape.input(params.at(name));
    }
    return bound;
}

namespace {

struct RowInputs {
    std::vector<int> valid;  // unmasked positions
    Matrix times;            // [n x 1]
    Matrix cont_values;      // [n x 1]
    Matrix cont_mask;        // [n x 1] 1 where continuous
    std::vector<int> feature_ids;
    std::vector<int> cat_ids;
};

RowInputs gather_row(const feat::TokenRow& row) {
    RowInputs in;
    for (int s = 0; s < row.max_len(); ++s)
        if (row.mask[static_cast<size_t>(s)]) in.valid.push_back(s);
    const Eigen::Index n = static_cast<Eigen::Index>(in.valid.size());
    in.times.resize(n, 1);
    in.cont_values.resize(n, 1);
    in.cont_mask.resize(n, 1);
    in.feature_ids.reserve(in.valid.size());
    in.cat_ids.reserve(in.valid.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const size_t s = static_cast<size_t>(in.valid[static_cast<size_t>(i)]);
        in.times(i, 0) = row.times[s];
        in.cont_values(i, 0) = row.cont_values[s];
        in.cont_mask(i, 0) = row.is_cont[s] ? 1.0 : 0.0;
        in.feature_ids.push_back(row.feature_ids[s]);
        in.cat_ids.push_back(row.cat_value_ids[s]);
    }
    return in;
}

// Scalar one-to-many embedder: x -> tanh(x w1 + b1) W2.
Value scalar_embed(Tape& t, Value x, Value w1, Value b1, Value w2) {
    return matmul(t, tanh_v(t, add_rowvec(t, matmul(t, x, w1), b1)), w2);
}

// Tokens for the valid positions of one row: [n x D].
Value embed_valid_tokens(Tape& t, const RowInputs& in, const BoundParams& p) {
    Value times = t.input(in.times);
    Value conts = t.input(in.cont_values);
    Value time_emb = scalar_embed(t, times, p.at("time_w1"), p.at("time_b1"), p.at("time_w2"));
    Value val_emb = scalar_embed(t, conts, p.at("val_w1"), p.at("val_b1"), p.at("val_w2"));
    Value feat_emb = gather_rows(t, p.at("feat_table"), in.feature_ids);
    Value cat_emb = gather_rows(t, p.at("cat_table"), in.cat_ids);

    const Eigen::Index n = in.times.rows();
    const Eigen::Index D = time_emb.cols();
    Matrix cont_bcast = in.cont_mask.replicate(1, D);
    Matrix cat_bcast = Matrix::Ones(n, D) - cont_bcast;
    Value value_part = add(t, hadamard(t, val_emb, t.input(cont_bcast)), hadamard(t, cat_emb, t.input(cat_bcast)));
    return add(t, add(t, time_emb, feat_emb), value_part);
}

}  // namespace

Value transformer_stack_g(Tape& t, Value x, const BoundParams& p, const std::string& prefix, int n_layers,
                          int n_heads, double dropout_p, bool train_mode, std::mt19937_64* rng) {
    const int D = static_cast<int>(x.cols());
    if (D % n_heads != 0) throw std::invalid_argument("transformer_stack: width not divisible by head count");
    const int dh = D / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::mt19937_64 dummy;
    std::mt19937_64& r = rng ? *rng : dummy;
    const bool drop = train_mode && dropout_p > 0.0;

    for (int l = 0; l < n_layers; ++l) {
        const std::string pre = prefix + "layer" + std::to_string(l) + ".";
        Value q = add_rowvec(t, matmul(t, x, p.at(pre + "wq")), p.at(pre + "bq"));
        Value k = add_rowvec(t, matmul(t, x, p.at(pre + "wk")), p.at(pre + "bk"));
        Value v = add_rowvec(t, matmul(t, x, p.at(pre + "wv")), p.at(pre + "bv"));

        std::vector<Value> heads;
        heads.reserve(static_cast<size_t>(n_heads));
        for (int h = 0; h < n_heads; ++h) {
            Value qh = slice_cols(t, q, h * dh, dh);
            Value kh = slice_cols(t, k, h * dh, dh);
            Value vh = slice_cols(t, v, h * dh, dh);
            Value scores = scale(t, matmul(t, qh, transpose(t, kh)), att_scale);
            Value attn = softmax_rows(t, scores);
            attn = dropout(t, attn, dropout_p, r, drop);
            heads.push_back(matmul(t, attn, vh));
        }
        Value o = heads[0];
        for (size_t h = 1; h < heads.size(); ++h) o = concat_cols(t, o, heads[h]);
        o = add_rowvec(t, matmul(t, o, p.at(pre + "wo")), p.at(pre + "bo"));
        x = layer_norm(t, add(t, x, o), p.at(pre + "ln1_g"), p.at(pre + "ln1_b"));

        Value hmid = gelu(t, add_rowvec(t, matmul(t, x, p.at(pre + "ffn_w1")), p.at(pre + "ffn_b1")));
        hmid = dropout(t, hmid, dropout_p, r, drop);
        Value f = add_rowvec(t, matmul(t, hmid, p.at(pre + "ffn_w2")), p.at(pre + "ffn_b2"));
        x = layer_norm(t, add(t, x, f), p.at(pre + "ln2_g"), p.at(pre + "ln2_b"));
    }
    return x;
}

Value embed_triplets_row(Tape& t, const feat::TokenRow& row, const BoundParams& p, const EncoderConfig& cfg) {
    cfg.validate();
    RowInputs in = gather_row(row);
    const int S = row.max_len();
    if (in.valid.empty()) return t.input(Matrix::Zero(S, cfg.d_token));
    Value tokens = embed_valid_tokens(t, in, p);
    // Scatter back into the padded layout; padded positions stay zero.
    Matrix scatter = Matrix::Zero(S, static_cast<Eigen::Index>(in.valid.size()));
    for (size_t i = 0; i < in.valid.size(); ++i)
        scatter(in.valid[i], static_cast<Eigen::Index>(i)) = 1.0;
    return matmul(t, t.input(scatter), tokens);
}

Matrix embed_triplets(const feat::TokenRow& row, const ParamStore& params, const EncoderConfig& cfg) {
    Tape tape;
    BoundParams bound = bind_params(tape, params, false);
    return embed_triplets_row(tape, row, bound, cfg).val();
}

Value encoder_tokens_row(Tape& t, const feat::TokenRow& row, const BoundParams& p, const EncoderConfig& cfg,
                         bool train_mode, std::mt19937_64* rng) {
    RowInputs in = gather_row(row);
    if (in.valid.empty()) throw std::invalid_argument("encode: fully masked row");
    Value tokens = embed_valid_tokens(t, in, p);
    return transformer_stack_g(t, tokens, p, "", cfg.n_layers, cfg.n_heads, cfg.dropout, train_mode, rng);
}

Value encode_batch(Tape& t, const feat::TokenBatch& batch, const BoundParams& p, const EncoderConfig& cfg,
                   bool train_mode, std::mt19937_64* rng) {
    cfg.validate();
    if (batch.rows.empty()) throw std::invalid_argument("encode: empty batch");
    std::vector<Value> pooled_rows;
    pooled_rows.reserve(batch.rows.size());
    for (const auto& row : batch.rows) {
        Value h = encoder_tokens_row(t, row, p, cfg, train_mode, rng);
        // Fusion self-attention: alpha = softmax(v . tanh(W h + b)) over tokens.
        Value scores = matmul(t, tanh_v(t, add_rowvec(t, matmul(t, h, p.at("fusion_w")), p.at("fusion_b"))),
                              p.at("fusion_v"));
        Value alpha = softmax_rows(t, transpose(t, scores));  // [1 x n]
        pooled_rows.push_back(matmul(t, alpha, h));           // [1 x D]
    }
    Value pooled = concat_rows(t, pooled_rows);
    return add_rowvec(t, matmul(t, pooled, p.at("pool_w")), p.at("pool_b"));
}

Matrix encode(const feat::TokenBatch& batch, const ParamStore& params, const EncoderConfig& cfg) {
    Tape tape;
    BoundParams bound = bind_params(tape, params, false);
    return encode_batch(tape, batch, bound, cfg, false, nullptr).val();
}

Value project_batch(Tape& t, Value embedding, Side side, const BoundParams& p) {
    Value w = p.at(side == Side::Pre ? "proj_pre" : "proj_post");
    return l2_normalize_rows(t, matmul(t, embedding, w));
}

Matrix project(const Matrix& embedding, Side side, const ParamStore& params) {
    Tape tape;
    Value emb = tape.input(embedding);
    Value w = tape.input(params.at(side == Side::Pre ? "proj_pre" : "proj_post"));
    return l2_normalize_rows(tape, matmul(tape, emb, w)).val();
}

}  // namespace ebcl::model
