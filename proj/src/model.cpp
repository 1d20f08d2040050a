#include "coupling_probe/model.hpp"

#include <cmath>
#include <random>

namespace cprobe {

std::string to_string(PosEncoding p) {
    switch (p) {
        case PosEncoding::rope: return "rope";
        case PosEncoding::sinusoidal: return "sinusoidal";
        case PosEncoding::none: return "none";
    }
    return "none";
}

PosEncoding parse_pos_encoding(const std::string& s) {
    if (s == "rope") return PosEncoding::rope;
    if (s == "sinusoidal") return PosEncoding::sinusoidal;
    if (s == "none") return PosEncoding::none;
    throw Error(ErrorCode::InvalidConfig, "unknown pos_encoding '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_ff < 1 || d_vocab < 1 || max_seq < 1) fail("all counts must be >= 1");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (pos_encoding == PosEncoding::rope && head_dim() % 2 != 0) fail("rope needs an even head dimension");
    if (!(ln_epsilon > 0.0) || !std::isfinite(ln_epsilon)) fail("ln_epsilon must be > 0");
}

namespace {

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw Error(ErrorCode::InvalidConfig, name + " has shape " + std::to_string(m.rows()) + "x" +
                                                  std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                                                  "x" + std::to_string(cols));
    }
}

void expect_shape(const Vector& v, Eigen::Index rows, const std::string& name) {
    if (v.size() != rows) {
        throw Error(ErrorCode::InvalidConfig,
                    name + " has length " + std::to_string(v.size()) + ", expected " + std::to_string(rows));
    }
}

}  // namespace

void ModelWeights::validate(const ModelConfig& c) const {
    const Eigen::Index d = c.d_model;
    expect_shape(token_embedding, c.d_vocab, d, "token_embedding");
    if (layers.size() != static_cast<std::size_t>(c.n_layers)) throw Error(ErrorCode::InvalidConfig, "layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& lw = layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        expect_shape(lw.W_q, d, d, p + "W_q");
        expect_shape(lw.W_k, d, d, p + "W_k");
        expect_shape(lw.W_v, d, d, p + "W_v");
        expect_shape(lw.W_o, d, d, p + "W_o");
        expect_shape(lw.ln1_gain, d, p + "ln1_gain");
        expect_shape(lw.ln1_bias, d, p + "ln1_bias");
        expect_shape(lw.ln2_gain, d, p + "ln2_gain");
        expect_shape(lw.ln2_bias, d, p + "ln2_bias");
        expect_shape(lw.W_ff1, d, c.d_ff, p + "W_ff1");
        expect_shape(lw.b_ff1, c.d_ff, p + "b_ff1");
        expect_shape(lw.W_ff2, c.d_ff, d, p + "W_ff2");
        expect_shape(lw.b_ff2, d, p + "b_ff2");
    }
    expect_shape(final_ln_gain, d, "final_ln_gain");
    expect_shape(final_ln_bias, d, "final_ln_bias");
    expect_shape(unembedding, c.d_vocab, d, "unembedding");

    for_each_tensor(*this, [](const std::string& name, const auto& t) {
        if (!all_finite(t)) throw Error(ErrorCode::InvalidInput, name + " has non-finite entries");
    });
}

bool ModelWeights::operator==(const ModelWeights& other) const {
    if (layers.size() != other.layers.size()) return false;
    bool equal = true;
    // Both sides enumerate tensors in the same order.
    std::vector<Matrix> lhs, rhs;
    for_each_tensor(*this, [&](const std::string&, const auto& t) { lhs.emplace_back(t); });
    for_each_tensor(other, [&](const std::string&, const auto& t) { rhs.emplace_back(t); });
    for (std::size_t i = 0; i < lhs.size() && equal; ++i) {
        equal = lhs[i].rows() == rhs[i].rows() && lhs[i].cols() == rhs[i].cols() && lhs[i] == rhs[i];
    }
    return equal;
}

ModelWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
        Matrix m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * normal(rng);
        return m;
    };

    const Eigen::Index d = c.d_model;
    const double residual_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
    ModelWeights w;
    w.token_embedding = gaussian(c.d_vocab, d, 1.0);
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights lw;
        const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
        lw.W_q = gaussian(d, d, s_d);
        lw.W_k = gaussian(d, d, s_d);
        lw.W_v = gaussian(d, d, s_d);
        lw.W_o = gaussian(d, d, s_d * residual_scale);
        lw.ln1_gain = Vector::Ones(d);
        lw.ln1_bias = Vector::Zero(d);
        lw.ln2_gain = Vector::Ones(d);
        lw.ln2_bias = Vector::Zero(d);
        lw.W_ff1 = gaussian(d, c.d_ff, s_d);
        lw.b_ff1 = Vector::Zero(c.d_ff);
        lw.W_ff2 = gaussian(c.d_ff, d, residual_scale / std::sqrt(static_cast<double>(c.d_ff)));
        lw.b_ff2 = Vector::Zero(d);
        w.layers.push_back(std::move(lw));
    }
    w.final_ln_gain = Vector::Ones(d);
    w.final_ln_bias = Vector::Zero(d);
    w.unembedding = gaussian(c.d_vocab, d, 1.0 / std::sqrt(static_cast<double>(d)));
    return w;
}

ModelWeights zero_weights(const ModelConfig& c) {
    c.validate();
    const Eigen::Index d = c.d_model;
    ModelWeights w;
    w.token_embedding = Matrix::Zero(c.d_vocab, d);
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights lw;
        lw.W_q = lw.W_k = lw.W_v = lw.W_o = Matrix::Zero(d, d);
        lw.ln1_gain = lw.ln2_gain = Vector::Ones(d);
        lw.ln1_bias = lw.ln2_bias = Vector::Zero(d);
        lw.W_ff1 = Matrix::Zero(d, c.d_ff);
        lw.b_ff1 = Vector::Zero(c.d_ff);
        lw.W_ff2 = Matrix::Zero(c.d_ff, d);
        lw.b_ff2 = Vector::Zero(d);
        w.layers.push_back(std::move(lw));
    }
    w.final_ln_gain = Vector::Ones(d);
    w.final_ln_bias = Vector::Zero(d);
    w.unembedding = Matrix::Zero(c.d_vocab, d);
    return w;
}

}  // namespace cprobe
