#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ebcl/featurizer.hpp"
#include "ebcl/nn.hpp"

namespace ebcl::model {

struct EncoderConfig {
    int d_token = 32;
    int n_layers = 2;
    int d_ff = 128;
    int n_heads = 2;
    int max_len = 512;
    int d_embed = 32;
    double dropout = 0.0;

    void validate() const;
};

/// Ordered named tensor collection; iteration order is insertion order so
/// optimizer state and checkpoints stay deterministic.
class ParamStore {
public:
    nn::Matrix& add(const std::string& name, nn::Matrix value);
    nn::Matrix& at(const std::string& name);
    const nn::Matrix& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const std::vector<std::string>& names() const { return names_; }
    size_t total_elements() const;

private:
    std::vector<std::string> names_;
    std::map<std::string, nn::Matrix> tensors_;
    std::map<std::string, bool> index_;
};

/// Truncated-normal(0.02) init for lookups/linears, zeros for biases, unit
/// layer-norm gains; log-temperature starts at ln(1/0.07).
ParamStore init_encoder_params(const EncoderConfig& config, int n_features, int n_cat_ids, uint64_t seed);

nn::Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng);

/// Append the tensors of an n_layers post-norm transformer under
/// "<prefix>layer<l>." names.
void add_transformer_params(ParamStore& params, const std::string& prefix, int n_layers, int d_model, int d_ff,
                            std::mt19937_64& rng);

/// Per-tape bound parameter values (trainable leaves or frozen inputs).
struct BoundParams {
    std::map<std::string, nn::Value> values;
    nn::Value at(const std::string& name) const;
};

BoundParams bind_params(nn::Tape& tape, const ParamStore& params, bool trainable);

/// Token embedding for one padded row: time/value embedders and lookup
/// tables summed per position; padded positions emit zero vectors.
nn::Value embed_triplets_row(nn::Tape& tape, const feat::TokenRow& row, const BoundParams& p,
                             const EncoderConfig& config);
nn::Matrix embed_triplets(const feat::TokenRow& row, const ParamStore& params, const EncoderConfig& config);

/// Per-token transformer outputs for the unmasked positions of one row
/// ([n_valid x d_token]); attention never sees padding.
nn::Value encoder_tokens_row(nn::Tape& tape, const feat::TokenRow& row, const BoundParams& p,
                             const EncoderConfig& config, bool train_mode, std::mt19937_64* rng);

/// Post-norm self-attention stack over the rows of x, reading tensors named
/// "<prefix>layer<l>.*".
nn::Value transformer_stack_g(nn::Tape& tape, nn::Value x, const BoundParams& p, const std::string& prefix,
                              int n_layers, int n_heads, double dropout, bool train_mode, std::mt19937_64* rng);

/// Full batch encode: transformer + fusion self-attention pooling + linear
/// projection -> [B x d_embed]. Throws on a fully masked row.
nn::Value encode_batch(nn::Tape& tape, const feat::TokenBatch& batch, const BoundParams& p,
                       const EncoderConfig& config, bool train_mode = false, std::mt19937_64* rng = nullptr);

/// Inference wrapper (no gradients, no dropout).
nn::Matrix encode(const feat::TokenBatch& batch, const ParamStore& params, const EncoderConfig& config);

enum class Side : uint8_t { Pre, Post };

/// Contrastive projection: embedding x W_side, rows L2-normalized. The pre
/// and post heads are unshared parameter sets.
nn::Value project_batch(nn::Tape& tape, nn::Value embedding, Side side, const BoundParams& p);
nn::Matrix project(const nn::Matrix& embedding, Side side, const ParamStore& params);

}  // namespace ebcl::model
