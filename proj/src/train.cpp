#include "coupling_probe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include "coupling_probe/checkpoint.hpp"

namespace cprobe {

namespace {

using FlatView = Eigen::Map<Eigen::VectorXd>;

std::vector<FlatView> flat_views(ModelWeights& w) {
    std::vector<FlatView> v;
    for_each_tensor(w, [&](const std::string&, auto& t) { v.emplace_back(t.data(), t.size()); });
    return v;
}

struct LnCache {
    Matrix xhat;
    Vector inv;  // 1 / sqrt(var + eps) per row
};

Matrix ln_forward(const Matrix& x, const Vector& gain, const Vector& bias, double eps, LnCache& cache) {
    const Eigen::Index d = x.cols();
    cache.xhat.resize(x.rows(), d);
    cache.inv.resize(x.rows());
    Matrix out(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double mean = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) mean += x(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        cache.inv(i) = inv;
        for (Eigen::Index j = 0; j < d; ++j) {
            cache.xhat(i, j) = (x(i, j) - mean) * inv;
            out(i, j) = (x(i, j) - mean) * inv * gain(j) + bias(j);
        }
    }
    return out;
}

Matrix ln_backward(const Matrix& dy, const LnCache& c, const Vector& gain, Vector& dgain, Vector& dbias) {
    dgain += (dy.cwiseProduct(c.xhat)).colwise().sum().transpose();
    dbias += dy.colwise().sum().transpose();
    const Matrix dxhat = dy * gain.asDiagonal();
    const double d = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double m1 = dxhat.row(i).sum() / d;
        const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
        dx.row(i) = c.inv(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2).matrix();
    }
    return dx;
}

double gelu_grad(double x) {
    const double x2 = x * x;
    const double t = std::tanh(kGeluSqrt2OverPi * (x + kGeluCubic * x2 * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x2);
}

struct LayerCache {
    bool kept = true;
    double scale = 1.0;
    LnCache ln1, ln2;
    Matrix a;        // LN1 output
    Matrix q, k, v;  // q and k after rotation
    std::vector<Matrix> probs;
    Matrix heads;
    Matrix g;
    Matrix z;  // FFN pre-activation
    Matrix u;  // gelu(z)
};

Matrix layer_forward(const Matrix& x, const LayerWeights& lw, const ModelConfig& c, LayerCache& lc) {
    if (!lc.kept) return x;
    lc.a = ln_forward(x, lw.ln1_gain, lw.ln1_bias, c.ln_epsilon, lc.ln1);
    lc.q = lc.a * lw.W_q;
    lc.k = lc.a * lw.W_k;
    lc.v = lc.a * lw.W_v;
    if (c.pos_encoding == PosEncoding::rope) {
        apply_rope(lc.q, c.n_heads);
        apply_rope(lc.k, c.n_heads);
    }
    const Eigen::Index hd = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    lc.heads.resize(x.rows(), x.cols());
    lc.probs.resize(static_cast<std::size_t>(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
        Matrix scores = lc.q.middleCols(h * hd, hd) * lc.k.middleCols(h * hd, hd).transpose();
        scores *= scale;
        lc.probs[h] = causal_softmax<double>(scores);
        lc.heads.middleCols(h * hd, hd) = lc.probs[h] * lc.v.middleCols(h * hd, hd);
    }
    const Matrix attn = lc.heads * lw.W_o;
    lc.g = ln_forward(x + attn, lw.ln2_gain, lw.ln2_bias, c.ln_epsilon, lc.ln2);
    lc.z = lc.g * lw.W_ff1;
    lc.z.rowwise() += lw.b_ff1.transpose();
    lc.u = gelu<double>(lc.z);
    Matrix f = lc.u * lw.W_ff2;
    f.rowwise() += lw.b_ff2.transpose();
    f += attn;
    return x + lc.scale * f;
}

Matrix layer_backward(const Matrix& dout, const LayerWeights& lw, const ModelConfig& c, const LayerCache& lc,
                      LayerWeights& gw) {
    if (!lc.kept) return dout;
    Matrix dx = dout;
    const Matrix df = lc.scale * dout;
    Matrix dattn = df;

    gw.W_ff2.noalias() += lc.u.transpose() * df;
    gw.b_ff2 += df.colwise().sum().transpose();
    Matrix dz = df * lw.W_ff2.transpose();
    dz = dz.cwiseProduct(lc.z.unaryExpr(&gelu_grad));
    gw.W_ff1.noalias() += lc.g.transpose() * dz;
    gw.b_ff1 += dz.colwise().sum().transpose();
    const Matrix dg = dz * lw.W_ff1.transpose();
    const Matrix dr = ln_backward(dg, lc.ln2, lw.ln2_gain, gw.ln2_gain, gw.ln2_bias);
    dx += dr;
    dattn += dr;

    gw.W_o.noalias() += lc.heads.transpose() * dattn;
    const Matrix dheads = dattn * lw.W_o.transpose();
    const Eigen::Index hd = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix dq(dout.rows(), dout.cols()), dk(dout.rows(), dout.cols()), dv(dout.rows(), dout.cols());
    for (int h = 0; h < c.n_heads; ++h) {
        const Matrix& p = lc.probs[h];
        const auto d_o = dheads.middleCols(h * hd, hd);
        dv.middleCols(h * hd, hd) = p.transpose() * d_o;
        const Matrix dp = d_o * lc.v.middleCols(h * hd, hd).transpose();
        // softmax backward; masked entries have p = 0 and stay zero
        const Vector row_dot = p.cwiseProduct(dp).rowwise().sum();
        Matrix ds = p.cwiseProduct(dp.colwise() - row_dot);
        ds *= scale;
        dq.middleCols(h * hd, hd) = ds * lc.k.middleCols(h * hd, hd);
        dk.middleCols(h * hd, hd) = ds.transpose() * lc.q.middleCols(h * hd, hd);
    }
    if (c.pos_encoding == PosEncoding::rope) {
        apply_rope(dq, c.n_heads, true);
        apply_rope(dk, c.n_heads, true);
    }
    gw.W_q.noalias() += lc.a.transpose() * dq;
    gw.W_k.noalias() += lc.a.transpose() * dk;
    gw.W_v.noalias() += lc.a.transpose() * dv;
    Matrix da = dq * lw.W_q.transpose();
    da.noalias() += dk * lw.W_k.transpose();
    da.noalias() += dv * lw.W_v.transpose();
    dx += ln_backward(da, lc.ln1, lw.ln1_gain, gw.ln1_gain, gw.ln1_bias);
    return dx;
}

// Summed cross-entropy of one sequence; gradients are scaled by `grad_scale`.
double sequence_loss(const Sequence& seq, const ModelConfig& c, const ModelWeights& w, ModelWeights* grad,
                     double grad_scale, const BlockSkip* skip) {
    if (seq.size() < 2) throw Error(ErrorCode::InvalidInput, "sequences need at least two tokens");
    const std::span<const TokenId> inputs(seq.data(), seq.size() - 1);
    Matrix x = embed(inputs, c, w);
    const Eigen::Index n = x.rows();

    std::vector<LayerCache> caches(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        auto& lc = caches[static_cast<std::size_t>(l)];
        if (skip && !skip->keep.empty()) {
            lc.kept = skip->keep[static_cast<std::size_t>(l)];
            lc.scale = skip->scale;
        }
        x = layer_forward(x, w.layers[static_cast<std::size_t>(l)], c, lc);
    }
    // the final LN sits either at the end of the last block or in front of the unembedding
    LnCache lnf;
    const Matrix y = ln_forward(x, w.final_ln_gain, w.final_ln_bias, c.ln_epsilon, lnf);
    const Matrix logits = y * w.unembedding.transpose();

    double loss = 0.0;
    Matrix dlogits(n, logits.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const int target = seq[static_cast<std::size_t>(i) + 1];
        if (target < 0 || target >= c.d_vocab) throw Error(ErrorCode::UnknownToken, "target id " + std::to_string(target));
        const double mx = logits.row(i).maxCoeff();
        const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
        const double z = e.sum();
        loss += std::log(z) + mx - logits(i, target);
        dlogits.row(i) = e / z;
        dlogits(i, target) -= 1.0;
    }
    if (!grad) return loss;

    dlogits *= grad_scale;
    grad->unembedding.noalias() += dlogits.transpose() * y;
    Matrix dx = ln_backward(dlogits * w.unembedding, lnf, w.final_ln_gain, grad->final_ln_gain, grad->final_ln_bias);
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        dx = layer_backward(dx, w.layers[ul], c, caches[ul], grad->layers[ul]);
    }
    for (Eigen::Index i = 0; i < n; ++i) grad->token_embedding.row(seq[static_cast<std::size_t>(i)]) += dx.row(i);
    return loss;
}

}  // namespace

void TrainRun::validate() const {
    config.validate();
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (!(optimizer.lr >= 0.0) || !std::isfinite(optimizer.lr)) bad("lr must be finite and >= 0");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
        bad("betas must lie in [0, 1)");
    }
    if (!(optimizer.eps > 0.0)) bad("eps must be positive");
    if (!(optimizer.weight_decay >= 0.0)) bad("weight_decay must be >= 0");
    if (steps < 0) bad("steps must be >= 0");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (eval_every < 1) bad("eval_every must be >= 1");
    if (!(block_skip >= 0.0 && block_skip < 1.0)) bad("block_skip must lie in [0, 1)");
    if (!std::is_sorted(checkpoint_steps.begin(), checkpoint_steps.end()) ||
        std::adjacent_find(checkpoint_steps.begin(), checkpoint_steps.end()) != checkpoint_steps.end()) {
        bad("checkpoint_steps must be strictly ascending");
    }
    for (int s : checkpoint_steps) {
        if (s < 0 || s > steps) bad("checkpoint step " + std::to_string(s) + " outside [0, steps]");
    }
}

std::vector<int> default_checkpoint_steps(int steps, int stride) {
    std::vector<int> out{0};
    for (int s = 1; s < std::min(steps, stride); s *= 2) out.push_back(s);
    for (int s = stride; s < steps; s += stride) out.push_back(s);
    if (steps > 0) out.push_back(steps);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

ModelWeights zeros_like(const ModelWeights& w) {
    ModelWeights z = w;
    for_each_tensor(z, [](const std::string&, auto& t) { t.setZero(); });
    return z;
}

double batch_loss(const std::vector<Sequence>& batch, const ModelConfig& config, const ModelWeights& weights,
                  ModelWeights* grad, const std::vector<BlockSkip>& skips) {
    if (batch.empty()) throw Error(ErrorCode::InvalidInput, "empty batch");
    if (!skips.empty() && skips.size() != batch.size()) throw Error(ErrorCode::ShapeMismatch, "one BlockSkip per sequence");
    std::size_t positions = 0;
    for (const auto& s : batch) positions += s.size() - 1;
    const double inv = 1.0 / static_cast<double>(positions);
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        total += sequence_loss(batch[b], config, weights, grad, inv, skips.empty() ? nullptr : &skips[b]);
    }
    return total * inv;
}

Adam::Adam(const ModelWeights& shape, const AdamConfig& config)
    : config_(config), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

void Adam::step(ModelWeights& weights, const ModelWeights& grad) {
    ++t_;
    auto w = flat_views(weights);
    auto g = flat_views(const_cast<ModelWeights&>(grad));
    auto m = flat_views(m_);
    auto v = flat_views(v_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t_);
    const double bc2 = 1.0 - std::pow(config_.beta2, t_);
    for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i].cwiseAbs2();
        const Eigen::ArrayXd update =
            (m[i].array() / bc1) / ((v[i].array() / bc2).sqrt() + config_.eps) + config_.weight_decay * w[i].array();
        w[i] -= (config_.lr * update).matrix();
    }
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int step) {
    return dir / ("checkpoint_step" + std::to_string(step) + ".json");
}

void write_loss_csv(const std::vector<LossPoint>& loss, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "step,train_loss,val_loss\n" << std::setprecision(17);
    for (const auto& p : loss) out << p.step << ',' << p.train_loss << ',' << p.val_loss << '\n';
}

TrainResult train(const TrainRun& run, const SyntheticTask& task, const TaskData& data,
                  const std::filesystem::path& out_dir) {
    run.validate();
    if (run.config.d_vocab < task.vocab()) throw Error(ErrorCode::InvalidConfig, "d_vocab smaller than the task vocabulary");
    if (run.config.max_seq < task.sequence_length() - 1) throw Error(ErrorCode::InvalidConfig, "max_seq shorter than task sequences");
    if (data.train.empty()) throw Error(ErrorCode::InvalidTask, "no training sequences");
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainResult result;
    result.weights = init_weights(run.config, run.seed);
    Adam adam(result.weights, run.optimizer);
    std::mt19937_64 rng(run.seed ^ 0x5bd1e9955bd1e995ULL);
    std::bernoulli_distribution drop(run.block_skip);

    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    auto val_loss = [&] {
        return data.val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                : batch_loss(data.val, run.config, result.weights);
    };
    auto snapshot = [&](int step) {
        if (!std::binary_search(run.checkpoint_steps.begin(), run.checkpoint_steps.end(), step)) return;
        result.snapshots[step] = result.weights;
        if (!out_dir.empty()) {
            const auto p = checkpoint_path(out_dir, step);
            save_checkpoint(run.config, result.weights, p,
                            {{"step", step}, {"seed", run.seed}, {"task", describe(task)}});
            result.checkpoint_files[step] = p;
        }
    };

    {
        // step-0 train loss on one batch worth of sequences, without drawing from the stream
        std::vector<Sequence> first;
        for (std::size_t i = 0; i < std::min<std::size_t>(order.size(), static_cast<std::size_t>(run.batch_size)); ++i) {
            first.push_back(data.train[order[i]]);
        }
        result.loss.push_back({0, batch_loss(first, run.config, result.weights), val_loss()});
    }
    snapshot(0);
    double running = 0.0;
    int running_n = 0;
    for (int step = 1; step <= run.steps; ++step) {
        std::vector<Sequence> batch;
        std::vector<BlockSkip> skips;
        for (int b = 0; b < run.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(data.train[order[cursor++]]);
            if (run.block_skip > 0.0) {
                BlockSkip s;
                s.scale = 1.0 / (1.0 - run.block_skip);
                for (int l = 0; l < run.config.n_layers; ++l) s.keep.push_back(!drop(rng));
                skips.push_back(std::move(s));
            }
        }
        ModelWeights grad = zeros_like(result.weights);
        const double loss = batch_loss(batch, run.config, result.weights, &grad, skips);
        if (!std::isfinite(loss)) {
            throw Error(ErrorCode::TrainingDiverged, "non-finite loss at step " + std::to_string(step));
        }
        adam.step(result.weights, grad);
        running += loss;
        ++running_n;
        if (step % run.eval_every == 0 || step == run.steps ||
            std::binary_search(run.checkpoint_steps.begin(), run.checkpoint_steps.end(), step)) {
            const double vl = val_loss();
            if (!data.val.empty() && !std::isfinite(vl)) {
                throw Error(ErrorCode::TrainingDiverged, "non-finite validation loss at step " + std::to_string(step));
            }
            result.loss.push_back({step, running / running_n, vl});
            running = 0.0;
            running_n = 0;
        }
        snapshot(step);
    }
    if (!out_dir.empty()) write_loss_csv(result.loss, out_dir / "loss.csv");
    return result;
}

}  // namespace cprobe
