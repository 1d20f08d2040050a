#pragma once

#include <cmath>
#include <span>
#include <type_traits>
#include <vector>

#include "coupling_probe/dual.hpp"
#include "coupling_probe/model.hpp"

namespace cprobe {

using TokenId = int;

inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;
inline constexpr double kRopeBase = 10000.0;

/// Hidden states of one prompt: X[0] is the embedding, X[l] the output of block l.
struct HiddenTrace {
    std::vector<Matrix> X;  // L + 1 matrices, n x d_model
    std::vector<Matrix> f;  // L block updates f^l(X^{l-1})

    Eigen::Index tokens() const { return X.empty() ? 0 : X.front().rows(); }
    int layers() const { return static_cast<int>(f.size()); }
};

struct BlockForward {
    Matrix f_out;
    Matrix block_out;
};

// ---------------------------------------------------------------------------
// Scalar-generic building blocks. Instantiated with double for inference and
// with Dual for forward-mode Jacobians.

namespace detail {

template <typename S>
inline constexpr bool is_dual_v = std::is_same_v<S, Dual>;

inline Matrix values(const MatrixX<Dual>& m) {
    return m.unaryExpr([](const Dual& x) { return x.val; });
}
inline Matrix tangents(const MatrixX<Dual>& m) {
    return m.unaryExpr([](const Dual& x) { return x.tan; });
}
inline MatrixX<Dual> make_dual(const Matrix& val, const Matrix& tan) {
    return val.binaryExpr(tan, [](double v, double t) { return Dual(v, t); });
}

}  // namespace detail

/// A * B with the tangent part propagated through plain double products.
template <typename SA, typename SB>
auto product(const MatrixX<SA>& a, const MatrixX<SB>& b) {
    using detail::make_dual;
    using detail::tangents;
    using detail::values;
    if constexpr (!detail::is_dual_v<SA> && !detail::is_dual_v<SB>) {
        return Matrix(a * b);
    } else if constexpr (detail::is_dual_v<SA> && !detail::is_dual_v<SB>) {
        return make_dual(values(a) * b, tangents(a) * b);
    } else if constexpr (!detail::is_dual_v<SA> && detail::is_dual_v<SB>) {
        return make_dual(a * values(b), a * tangents(b));
    } else {
        const Matrix av = values(a);
        const Matrix bv = values(b);
        return make_dual(av * bv, tangents(a) * bv + av * tangents(b));
    }
}

/// Row-wise layer normalization with population variance.
template <typename S>
MatrixX<S> layer_norm(const MatrixX<S>& x, const Vector& gain, const Vector& bias, double eps) {
    using std::sqrt;
    const Eigen::Index d = x.cols();
    MatrixX<S> out(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        S mean = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) mean += x(i, j);
        mean /= static_cast<double>(d);
        S var = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const S c = x(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const S inv = S(1.0) / sqrt(var + eps);
        for (Eigen::Index j = 0; j < d; ++j) out(i, j) = (x(i, j) - mean) * inv * gain(j) + bias(j);
    }
    return out;
}

/// GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename S>
MatrixX<S> gelu(const MatrixX<S>& x) {
    using std::tanh;
    return x.unaryExpr([](const S& v) {
        const S inner = kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v);
        return S(0.5) * v * (S(1.0) + tanh(inner));
    });
}

/// Rotation angles shared by every head: cos and sin tables of size n x head_dim/2.
struct RopeTable {
    Matrix cos, sin;
};

inline RopeTable rope_table(Eigen::Index n, Eigen::Index head_dim) {
    RopeTable t{Matrix(n, head_dim / 2), Matrix(n, head_dim / 2)};
    for (Eigen::Index i = 0; i < head_dim / 2; ++i) {
        const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        for (Eigen::Index pos = 0; pos < n; ++pos) {
            const double angle = static_cast<double>(pos) * freq;
            t.cos(pos, i) = std::cos(angle);
            t.sin(pos, i) = std::sin(angle);
        }
    }
    return t;
}

/// Rotates consecutive (even, odd) coordinate pairs of every head by position-dependent
/// angles; `inverse` applies the transposed rotation.
template <typename S>
void apply_rope(MatrixX<S>& x, int n_heads, bool inverse = false) {
    const Eigen::Index hd = x.cols() / n_heads;
    const RopeTable t = rope_table(x.rows(), hd);
    const double sign = inverse ? -1.0 : 1.0;
    for (Eigen::Index pos = 0; pos < x.rows(); ++pos) {
        for (int h = 0; h < n_heads; ++h) {
            for (Eigen::Index i = 0; i < hd / 2; ++i) {
                const double c = t.cos(pos, i);
                const double s = sign * t.sin(pos, i);
                const Eigen::Index a = h * hd + 2 * i;
                const S x0 = x(pos, a);
                const S x1 = x(pos, a + 1);
                x(pos, a) = x0 * c - x1 * s;
                x(pos, a + 1) = x0 * s + x1 * c;
            }
        }
    }
}

/// Row-wise causal softmax: entries above the diagonal are exactly zero.
template <typename S>
MatrixX<S> causal_softmax(const MatrixX<S>& scores) {
    using std::exp;
    const Eigen::Index n = scores.rows();
    MatrixX<S> p = MatrixX<S>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double m = value_of(scores(i, 0));
        for (Eigen::Index j = 1; j <= i; ++j) m = std::max(m, value_of(scores(i, j)));
        S sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
            p(i, j) = exp(scores(i, j) - m);
            sum += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
    }
    return p;
}

/// Causal multi-head self-attention on already-normalized rows (no biases).
template <typename S>
MatrixX<S> causal_attention(const MatrixX<S>& xn, const LayerWeights& lw, const ModelConfig& config) {
    MatrixX<S> q = product(xn, lw.W_q);
    MatrixX<S> k = product(xn, lw.W_k);
    const MatrixX<S> v = product(xn, lw.W_v);
    if (config.pos_encoding == PosEncoding::rope) {
        apply_rope(q, config.n_heads);
        apply_rope(k, config.n_heads);
    }
    const Eigen::Index hd = config.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    MatrixX<S> heads(xn.rows(), xn.cols());
    for (int h = 0; h < config.n_heads; ++h) {
        const MatrixX<S> qh = q.middleCols(h * hd, hd);
        const MatrixX<S> kt = k.middleCols(h * hd, hd).transpose();
        const MatrixX<S> vh = v.middleCols(h * hd, hd);
        MatrixX<S> scores = product(qh, kt);
        scores *= S(scale);
        heads.middleCols(h * hd, hd) = product(causal_softmax(scores), vh);
    }
    return product(heads, lw.W_o);
}

template <typename S>
MatrixX<S> feed_forward(const MatrixX<S>& g, const LayerWeights& lw) {
    MatrixX<S> hidden = product(g, lw.W_ff1);
    hidden.rowwise() += lw.b_ff1.transpose().template cast<S>();
    MatrixX<S> out = product(gelu(hidden), lw.W_ff2);
    out.rowwise() += lw.b_ff2.transpose().template cast<S>();
    return out;
}

/// Intermediate quantities of one block: h = MHA(LN1(X)), g = LN2(X + h), f = h + FFN(g).
template <typename S>
struct BlockParts {
    MatrixX<S> h;
    MatrixX<S> g;
    MatrixX<S> f;
};

template <typename S>
BlockParts<S> block_parts(const MatrixX<S>& x, const LayerWeights& lw, const ModelConfig& config) {
    BlockParts<S> parts;
    parts.h = causal_attention<S>(layer_norm<S>(x, lw.ln1_gain, lw.ln1_bias, config.ln_epsilon), lw, config);
    const MatrixX<S> pre_ln2 = x + parts.h;
    parts.g = layer_norm<S>(pre_ln2, lw.ln2_gain, lw.ln2_bias, config.ln_epsilon);
    parts.f = parts.h + feed_forward<S>(parts.g, lw);
    return parts;
}

/// The skip-free block update f^l(X).
template <typename S>
MatrixX<S> block_update(const MatrixX<S>& x, int layer, const ModelConfig& config, const ModelWeights& weights) {
    return block_parts<S>(x, weights.layers[static_cast<std::size_t>(layer)], config).f;
}

/// Full block output: X + f, or FinalLN(X + f) for the last block when final_ln is set.
template <typename S>
MatrixX<S> block_output(const MatrixX<S>& x, const MatrixX<S>& f, int layer, const ModelConfig& config,
                        const ModelWeights& weights) {
    MatrixX<S> out = x + f;
    if (layer == config.n_layers - 1 && config.final_ln) {
        out = layer_norm<S>(out, weights.final_ln_gain, weights.final_ln_bias, config.ln_epsilon);
    }
    return out;
}

// ---------------------------------------------------------------------------

/// Standard sinusoidal position table, n x d.
Matrix sinusoidal_positions(Eigen::Index n, Eigen::Index d);

Matrix embed(std::span<const TokenId> tokens, const ModelConfig& config, const ModelWeights& weights);

BlockForward block_forward(const Matrix& x, int layer, const ModelConfig& config, const ModelWeights& weights);

HiddenTrace forward_trace(std::span<const TokenId> tokens, const ModelConfig& config, const ModelWeights& weights);

/// Runs every block starting from an explicit X^0.
HiddenTrace forward_from_embedding(const Matrix& x0, const ModelConfig& config, const ModelWeights& weights);

/// Unembeds layer `at_layer`. `apply_final_ln` applies the final LN to intermediate
/// layers; X^L already carries it when the model was configured with final_ln.
Matrix logits(const HiddenTrace& trace, const ModelConfig& config, const ModelWeights& weights, int at_layer,
              bool apply_final_ln);

/// Index of the maximal entry; ties resolve to the lowest index.
TokenId argmax(const Eigen::Ref<const Vector>& row);

/// Next-token prediction from the last row of final-layer logits.
TokenId predict_next(const HiddenTrace& trace, const ModelConfig& config, const ModelWeights& weights);

}  // namespace cprobe
