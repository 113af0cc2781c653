#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "idgenrec/autodiff.hpp"
#include "idgenrec/tokenizer.hpp"

namespace idgenrec {

using ad::Mat;

struct ModelConfig {
    int d_model = 64;
    int layers = 2;
    int heads = 4;
    int ff_dim = 128;
    int max_src_len = 64;
    int max_tgt_len = 20;
    int vocab_size = 0;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttentionWeights {
    std::size_t wq, wk, wv, wo;
};

struct FeedForwardWeights {
    std::size_t w1, b1, w2, b2;
};

struct EncoderLayerWeights {
    AttentionWeights self;
    FeedForwardWeights ff;
};

struct DecoderLayerWeights {
    AttentionWeights self;
    AttentionWeights cross;
    FeedForwardWeights ff;
};

/// Tensor indices into ModelParams::tensors.
struct ParamLayout {
    std::size_t embed = 0;
    std::size_t pos_src = 0;
    std::size_t pos_tgt = 0;
    std::vector<EncoderLayerWeights> encoder;
    std::vector<DecoderLayerWeights> decoder;
};

/// Encoder-decoder transformer weights. The token embedding table doubles as
/// the output projection.
struct ModelParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<std::string> names;
    std::vector<Mat> tensors;

    const Mat& embedding() const { return tensors[layout.embed]; }
    std::size_t scalar_count() const;
    std::uint64_t hash() const;
};

using Gradients = std::vector<Mat>;

ModelParams init_params(const ModelConfig& config);

/// Builds forward passes of one ModelParams on a tape.
class Graph {
public:
    Graph(ad::Tape& tape, const ModelParams& params, bool track_params);

    ad::Tape& tape() const { return tape_; }
    const ModelParams& params() const { return params_; }

    ad::Var param(std::size_t i) const { return vars_[i]; }
    ad::Var embedding() const { return vars_[params_.layout.embed]; }

    ad::Var embed(std::span<const TokenId> ids) const;
    ad::Var encode(std::span<const TokenId> src) const;
    /// Same as encode() but takes already-embedded rows (positional
    /// embeddings are still added).
    ad::Var encode_embeddings(ad::Var src_embs) const;
    /// Logits for every position of `decoder_input` (rows x vocab).
    ad::Var decode(ad::Var context, std::span<const TokenId> decoder_input) const;

    /// Teacher-forced -sum log p(target_i | target_<i, context).
    ad::Var sequence_nll(ad::Var context, std::span<const TokenId> target) const;

    /// Gradients of the last backward() pass, one tensor per parameter.
    Gradients gradients() const;
    /// Runs backward from `loss` and returns parameter gradients.
    Gradients backward(ad::Var loss) const;

private:
    ad::Var attention(ad::Var query_in, ad::Var kv_in, const AttentionWeights& w, bool causal) const;
    ad::Var feed_forward(ad::Var x, const FeedForwardWeights& w) const;

    ad::Tape& tape_;
    const ModelParams& params_;
    std::vector<ad::Var> vars_;
};

/// Decoder input for teacher forcing: PAD acts as the start symbol.
TokenSequence shift_right(std::span<const TokenId> target);

struct EncoderState {
    Mat context;
};

EncoderState encode(const ModelParams& params, std::span<const TokenId> src);
EncoderState encode_embeddings(const ModelParams& params, const Mat& src_embs);

/// Next-token logits after `prefix`.
Eigen::VectorXd decoder_logits(const ModelParams& params, const EncoderState& state, std::span<const TokenId> prefix);
/// Teacher-forced logits, row i predicts target[i].
Mat decoder_logits_all(const ModelParams& params, const EncoderState& state, std::span<const TokenId> target);

double sequence_nll(const ModelParams& params, const EncoderState& state, std::span<const TokenId> target);

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits);
/// softmax(logits) . table
Eigen::VectorXd expected_embedding(const Eigen::VectorXd& logits, const Mat& table);
/// Row-wise expected embeddings on a tape.
ad::Var expected_embeddings(ad::Tape& tape, ad::Var logits, ad::Var table);

struct AdamState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    long step = 0;

    static AdamState zeros_like(const ModelParams& params);
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

void apply_update(ModelParams& params, const Gradients& grads, AdamState& state, double lr);

Gradients zero_gradients(const ModelParams& params);
void accumulate(Gradients& into, const Gradients& g);

struct Checkpoint {
    ModelParams params;
    AdamState adam;
    std::uint64_t vocab_hash = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws VocabularyMismatch when the stored vocabulary hash differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_vocab_hash);

} // namespace idgenrec
