#include "coupling_probe/transformer.hpp"

#include <string>

namespace cprobe {

Matrix sinusoidal_positions(Eigen::Index n, Eigen::Index d) {
    Matrix pe(n, d);
    for (Eigen::Index pos = 0; pos < n; ++pos) {
        for (Eigen::Index j = 0; j < d; ++j) {
            const Eigen::Index pair = j / 2;
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(pair) / static_cast<double>(d));
            pe(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

Matrix embed(std::span<const TokenId> tokens, const ModelConfig& config, const ModelWeights& weights) {
    if (tokens.empty()) throw Error(ErrorCode::EmptyPrompt, "prompt has no tokens");
    if (tokens.size() > static_cast<std::size_t>(config.max_seq)) {
        throw Error(ErrorCode::SequenceTooLong, std::to_string(tokens.size()) + " tokens exceed max_seq " +
                                                    std::to_string(config.max_seq));
    }
    const auto n = static_cast<Eigen::Index>(tokens.size());
    Matrix x(n, config.d_model);
    for (Eigen::Index i = 0; i < n; ++i) {
        const TokenId t = tokens[static_cast<std::size_t>(i)];
        if (t < 0 || t >= config.d_vocab) throw Error(ErrorCode::UnknownToken, "token id " + std::to_string(t));
        x.row(i) = weights.token_embedding.row(t);
    }
    if (config.pos_encoding == PosEncoding::sinusoidal) x += sinusoidal_positions(n, config.d_model);
    return x;
}

BlockForward block_forward(const Matrix& x, int layer, const ModelConfig& config, const ModelWeights& weights) {
    if (layer < 0 || layer >= config.n_layers) throw Error(ErrorCode::InvalidInput, "layer index out of range");
    require_finite(x, "block input");
    BlockForward out;
    out.f_out = block_update<double>(x, layer, config, weights);
    out.block_out = block_output<double>(x, out.f_out, layer, config, weights);
    if (!all_finite(out.f_out) || !all_finite(out.block_out)) {
        throw Error(ErrorCode::NumericalOverflow, "non-finite activation in layer " + std::to_string(layer));
    }
    return out;
}

HiddenTrace forward_trace(std::span<const TokenId> tokens, const ModelConfig& config, const ModelWeights& weights) {
    config.validate();
    return forward_from_embedding(embed(tokens, config, weights), config, weights);
}

HiddenTrace forward_from_embedding(const Matrix& x0, const ModelConfig& config, const ModelWeights& weights) {
    HiddenTrace trace;
    trace.X.reserve(static_cast<std::size_t>(config.n_layers) + 1);
    trace.X.push_back(x0);
    for (int l = 0; l < config.n_layers; ++l) {
        BlockForward step = block_forward(trace.X.back(), l, config, weights);
        trace.f.push_back(std::move(step.f_out));
        trace.X.push_back(std::move(step.block_out));
    }
    return trace;
}

Matrix logits(const HiddenTrace& trace, const ModelConfig& config, const ModelWeights& weights, int at_layer,
              bool apply_final_ln) {
    if (at_layer < 0 || at_layer > trace.layers()) throw Error(ErrorCode::InvalidInput, "at_layer out of range");
    const Matrix& x = trace.X[static_cast<std::size_t>(at_layer)];
    const bool already_normalized = at_layer == trace.layers() && config.final_ln;
    if (apply_final_ln && !already_normalized) {
        return layer_norm<double>(x, weights.final_ln_gain, weights.final_ln_bias, config.ln_epsilon) *
               weights.unembedding.transpose();
    }
    return x * weights.unembedding.transpose();
}

TokenId argmax(const Eigen::Ref<const Vector>& row) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < row.size(); ++i) {
        if (row(i) > row(best)) best = i;
    }
    return static_cast<TokenId>(best);
}

TokenId predict_next(const HiddenTrace& trace, const ModelConfig& config, const ModelWeights& weights) {
    const Matrix l = logits(trace, config, weights, trace.layers(), true);
    return argmax(l.row(l.rows() - 1).transpose());
}

}  // namespace cprobe
