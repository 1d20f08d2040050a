#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coupling_probe/linalg.hpp"

namespace cprobe {

enum class PosEncoding { rope, sinusoidal, none };

std::string to_string(PosEncoding p);
PosEncoding parse_pos_encoding(const std::string& s);

struct ModelConfig {
    int n_layers = 2;
    int d_model = 16;
    int n_heads = 2;
    int d_ff = 64;
    int d_vocab = 16;
    int max_seq = 64;
    PosEncoding pos_encoding = PosEncoding::rope;
    double ln_epsilon = 1e-5;
    bool final_ln = true;

    int head_dim() const { return d_model / n_heads; }

    /// Throws InvalidConfig on any violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Matrix W_q, W_k, W_v, W_o;  // d_model x d_model, applied as X * W
    Vector ln1_gain, ln1_bias;
    Vector ln2_gain, ln2_bias;
    Matrix W_ff1;  // d_model x d_ff
    Vector b_ff1;
    Matrix W_ff2;  // d_ff x d_model
    Vector b_ff2;
};

/// All learnable tensors. Token rows are multiplied from the left (`X * W`), so the
/// output of a linear layer for token row x is x^T W.
struct ModelWeights {
    Matrix token_embedding;  // d_vocab x d_model
    std::vector<LayerWeights> layers;
    Vector final_ln_gain, final_ln_bias;
    Matrix unembedding;  // d_vocab x d_model, logits = M x

    /// Throws InvalidConfig if shapes disagree with `config`, InvalidInput if any entry is non-finite.
    void validate(const ModelConfig& config) const;

    bool operator==(const ModelWeights& other) const;
};

/// Random initialization: embeddings N(0, 1), linear maps N(0, 1/fan_in) with the
/// residual-writing projections (W_o, W_ff2) further scaled by 1/sqrt(2L), LN gains 1,
/// biases 0, unembedding N(0, 1/d_model).
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Every weight set to zero except LN gains (1); blocks then compute f = 0.
ModelWeights zero_weights(const ModelConfig& config);

/// Visits every parameter tensor with a stable name (used by checkpoints, the optimizer
/// and gradient checks). Vectors are passed as d x 1 matrices via Eigen::Ref.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
    fn(std::string("token_embedding"), w.token_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "W_q", lw.W_q);
        fn(p + "W_k", lw.W_k);
        fn(p + "W_v", lw.W_v);
        fn(p + "W_o", lw.W_o);
        fn(p + "ln1_gain", lw.ln1_gain);
        fn(p + "ln1_bias", lw.ln1_bias);
        fn(p + "ln2_gain", lw.ln2_gain);
        fn(p + "ln2_bias", lw.ln2_bias);
        fn(p + "W_ff1", lw.W_ff1);
        fn(p + "b_ff1", lw.b_ff1);
        fn(p + "W_ff2", lw.W_ff2);
        fn(p + "b_ff2", lw.b_ff2);
    }
    fn(std::string("final_ln_gain"), w.final_ln_gain);
    fn(std::string("final_ln_bias"), w.final_ln_bias);
    fn(std::string("unembedding"), w.unembedding);
}

}  // namespace cprobe
