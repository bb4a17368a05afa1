#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ebcl/encoder.hpp"
#include "ebcl/events.hpp"
#include "ebcl/featurizer.hpp"
#include "ebcl/nn.hpp"

namespace ebcl::objectives {

enum class Objective : uint8_t { Ebcl, Ocp, Strats, Duett };

const char* to_string(Objective o);
Objective objective_from_string(const std::string& s);

/// A tokenized window pair ready for the encoder.
struct EncodedPair {
    feat::TokenRow pre;
    feat::TokenRow post;
    std::string patient_id;
    double event_time = 0.0;
    int label = -1;  // -1 = unlabeled
};

using PairDataset = std::vector<EncodedPair>;

/// Tokenize extracted window pairs against a vocabulary; pairs whose sides
/// fall below min_len after feature dropping are skipped.
PairDataset encode_pairs(const std::vector<events::WindowPair>& pairs, const events::Dataset& dataset,
                         const feat::Vocabulary& vocab, int max_len, int min_len);

struct ContrastiveBatch {
    feat::TokenBatch pre;
    feat::TokenBatch post;
    std::vector<int> pair_indices;  // into the source PairDataset
};

/// One epoch of contrastive batches: each pair appears at most once, and a
/// batch never holds two events of the same patient.
class EbclEpochSampler {
public:
    EbclEpochSampler(const PairDataset& pairs, int batch_size, std::mt19937_64& rng);
    std::optional<ContrastiveBatch> next();

private:
    const PairDataset& pairs_;
    int batch_size_;
    std::vector<int> remaining_;
};

ContrastiveBatch sample_ebcl_batch(const PairDataset& pairs, int batch_size, std::mt19937_64& rng);

/// Symmetric CLIP loss over unit-normalized row embeddings (reference
/// implementation; the tape version below is used for training).
double clip_loss(const nn::Matrix& pre_emb, const nn::Matrix& post_emb, double log_temp);
nn::Value clip_loss_g(nn::Tape& tape, nn::Value pre_emb, nn::Value post_emb, nn::Value log_temp);

// --- Order-contrastive pretraining -----------------------------------------

struct OcpExample {
    feat::TokenRow tokens;
    int label = 0;  // 1 iff halves swapped
};

/// Build one OCP example from a trajectory: a contiguous block of at most
/// max_len encodable observations, halves swapped with probability 1/2 and
/// times re-anchored with the T_GAP adjustment. Rejected when fewer than
/// 2*min_half encodable observations exist.
std::optional<OcpExample> ocp_make_example(const events::PatientTrajectory& traj, const events::Dataset& dataset,
                                           const feat::Vocabulary& vocab, std::mt19937_64& rng, int max_len = 512,
                                           int min_half = 16);

/// The OCP time re-anchoring on a block of observations, deterministic.
/// Unswapped: relative to the last point. Swapped: the latter half leads,
/// anchored to its last point; the original first half follows with
/// T_GAP = t_last - t_half added, so each half ends at relative time 0.
std::vector<feat::RelativeObservation> ocp_relative_times(const std::vector<const events::Observation*>& block,
                                                          bool swapped);

/// BCE of a linear head over pooled embeddings.
nn::Value ocp_loss_g(nn::Tape& tape, nn::Value embeddings, const std::vector<int>& labels, nn::Value head_w,
                     nn::Value head_b);

// --- STraTS forecasting -----------------------------------------------------

struct ForecastExample {
    feat::TokenRow input;
    std::vector<std::pair<int, double>> targets;  // vocab feature id -> z-normalized value
};

/// Random forecast window of window_len_days with >= 1 continuous target and
/// >= min_input encodable observations before it; input keeps the max_len
/// most recent. Rejected after max_attempts window draws.
std::optional<ForecastExample> strats_make_example(const events::PatientTrajectory& traj,
                                                   const events::Dataset& dataset, const feat::Vocabulary& vocab,
                                                   double window_len_days, std::mt19937_64& rng, int max_len = 512,
                                                   int min_input = 16, int max_attempts = 64);

/// Deterministic variant with an explicit forecast-window start.
std::optional<ForecastExample> strats_example_at(const events::PatientTrajectory& traj,
                                                 const events::Dataset& dataset, const feat::Vocabulary& vocab,
                                                 double window_start, double window_len_days, int max_len = 512,
                                                 int min_input = 16);

/// MSE over observed target features only. preds is [B x n_features].
double strats_loss(const nn::Matrix& preds, const std::vector<ForecastExample>& examples);
nn::Value strats_loss_g(nn::Tape& tape, nn::Value preds, const std::vector<ForecastExample>& examples);

// --- DuETT masked imputation -------------------------------------------------

struct DuettConfig {
    int n_bins = 32;
    int top_k = 128;
    int d_model = 16;
    int n_heads = 2;
    int d_ff = 32;
    int n_layers_time = 2;
    int n_layers_feat = 2;
    double mask_rate = 0.15;
    double dropout = 0.0;
};

struct ImputationExample {
    nn::Matrix values;    // [n_bins x n_feat] cell means, 0 where unobserved
    nn::Matrix counts;    // [n_bins x n_feat]
    nn::Matrix observed;  // 1 where count > 0
    nn::Matrix hidden;    // 1 where the cell is masked for reconstruction
};

/// Uniform time bins over the pre+post span of a pair; per-cell mean value
/// and count; cells hidden at mask_rate. Rejected when the grid is empty.
std::optional<ImputationExample> duett_make_example(const events::WindowPair& pair, const events::Dataset& dataset,
                                                    const feat::Vocabulary& vocab, const DuettConfig& config,
                                                    std::mt19937_64& rng);

model::ParamStore init_duett_params(const DuettConfig& config, uint64_t seed);

struct DuettOutput {
    nn::Value presence_logits;  // [n_bins*n_feat x 1]
    nn::Value values;           // [n_bins*n_feat x 1]
    nn::Value cells;            // [n_bins*n_feat x d_model]
};

/// Axial encoder: 2 transformer layers over the time axis then 2 over the
/// feature axis, on cell embeddings of (masked value, masked count, hidden).
DuettOutput duett_forward_g(nn::Tape& tape, const ImputationExample& ex, const model::BoundParams& p,
                            const DuettConfig& config, bool train_mode = false, std::mt19937_64* rng = nullptr);

/// BCE on presence of hidden cells + MSE on values of hidden observed cells.
nn::Value duett_loss_g(nn::Tape& tape, const DuettOutput& out, const ImputationExample& ex);

}  // namespace ebcl::objectives
