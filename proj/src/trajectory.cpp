#include "coupling_probe/trajectory.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace cprobe {

LineShape line_shape_score(const Matrix& trajectory) {
    if (trajectory.rows() < 2) throw Error(ErrorCode::DegenerateTrajectory, "trajectory needs at least two points");
    require_finite(trajectory, "trajectory");

    LineShape out;
    Vector walk = Vector::Zero(trajectory.cols());
    for (Eigen::Index l = 1; l < trajectory.rows(); ++l) {
        const Vector step = (trajectory.row(l) - trajectory.row(l - 1)).transpose();
        const double len = step.norm();
        if (len < kLssStepGuard) {
            ++out.steps_skipped;
            continue;
        }
        walk += step / len;
        ++out.steps_used;
    }
    if (out.steps_used == 0) throw Error(ErrorCode::DegenerateTrajectory, "fewer than two distinct points");
    out.lss = static_cast<double>(out.steps_used) / walk.norm();
    return out;
}

Expodistance expodistance(const Vector& norms) {
    if (norms.size() < 2) throw Error(ErrorCode::DegenerateNorm, "need at least two norms");
    for (double n : norms) {
        if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorCode::DegenerateNorm, "norms must be positive and finite");
    }
    Expodistance out;
    const Eigen::Index L = norms.size() - 1;
    out.alphas.resize(L);
    for (Eigen::Index l = 0; l < L; ++l) out.alphas(l) = std::log(norms(l + 1) / norms(l));
    const double mean = out.alphas.mean();
    const double var = (out.alphas.array() - mean).square().sum() / static_cast<double>(L);
    if (std::abs(mean) <= 1e-12) {
        out.undefined = true;
        out.ed = std::numeric_limits<double>::quiet_NaN();
    } else {
        out.ed = var / (mean * mean);
    }
    return out;
}

namespace {

// Fixed summation order, so equal rows give equal norms regardless of storage alignment.
double row_norm(const Matrix& m, Eigen::Index i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += m(i, j) * m(i, j);
    return std::sqrt(s);
}

}  // namespace

Matrix token_trajectory(const HiddenTrace& trace, Eigen::Index token) {
    if (token < 0 || token >= trace.tokens()) throw Error(ErrorCode::InvalidInput, "token index out of range");
    Matrix traj(static_cast<Eigen::Index>(trace.X.size()), trace.X.front().cols());
    for (std::size_t l = 0; l < trace.X.size(); ++l) traj.row(static_cast<Eigen::Index>(l)) = trace.X[l].row(token);
    return traj;
}

Matrix layer_norm_profile(const HiddenTrace& trace) {
    Matrix out(trace.tokens(), static_cast<Eigen::Index>(trace.X.size()));
    for (std::size_t l = 0; l < trace.X.size(); ++l) {
        for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, static_cast<Eigen::Index>(l)) = row_norm(trace.X[l], i);
    }
    return out;
}

double step_length_cv(const Matrix& trajectory) {
    if (trajectory.rows() < 2) throw Error(ErrorCode::DegenerateTrajectory, "trajectory needs at least two points");
    Vector steps(trajectory.rows() - 1);
    for (Eigen::Index l = 1; l < trajectory.rows(); ++l) steps(l - 1) = (trajectory.row(l) - trajectory.row(l - 1)).norm();
    const double mean = steps.mean();
    if (mean == 0.0) return 0.0;
    const double var = (steps.array() - mean).square().mean();
    return std::sqrt(var) / mean;
}

TrajectoryMetrics trajectory_metrics(const HiddenTrace& trace, Eigen::Index token) {
    const Matrix traj = token_trajectory(trace, token);
    TrajectoryMetrics m;
    m.token = token;
    m.line_shape = line_shape_score(traj);
    m.norms.resize(traj.rows());
    for (Eigen::Index l = 0; l < traj.rows(); ++l) m.norms(l) = row_norm(traj, l);
    m.expo = expodistance(m.norms);
    m.step_cv = step_length_cv(traj);
    return m;
}

double softmax_entropy(const Vector& logits) {
    const double mx = logits.maxCoeff();
    const Eigen::ArrayXd shifted = logits.array() - mx;
    const Eigen::ArrayXd e = shifted.exp();
    const double z = e.sum();
    // H = log z - sum p_i * shifted_i
    const double h = std::log(z) - (e * shifted).sum() / z;
    return std::max(0.0, h);
}

Vector logit_entropy_profile(const HiddenTrace& trace, const ModelConfig& config, const ModelWeights& weights,
                             bool apply_final_ln) {
    Vector out(static_cast<Eigen::Index>(trace.X.size()));
    for (int l = 0; l <= trace.layers(); ++l) {
        const Matrix lg = logits(trace, config, weights, l, apply_final_ln);
        out(l) = softmax_entropy(lg.row(lg.rows() - 1).transpose());
    }
    return out;
}

PcaTrajectories pca_trajectories(const HiddenTrace& trace) {
    PcaTrajectories out;
    out.fit = pca_fit_2d(trace.X.back());
    for (Eigen::Index t = 0; t < trace.tokens(); ++t) out.projected.push_back(out.fit.project(token_trajectory(trace, t)));
    return out;
}

double cosine_similarity(const Vector& a, const Vector& b) {
    const double denom = a.norm() * b.norm();
    if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return a.dot(b) / denom;
}

std::vector<PerturbationResult> perturbation_probe(std::span<const TokenId> tokens, const std::vector<double>& scales,
                                                   const ModelConfig& config, const ModelWeights& weights,
                                                   std::uint64_t seed) {
    for (double s : scales) {
        if (!(s >= 0.0) || !std::isfinite(s)) throw Error(ErrorCode::InvalidInput, "noise scales must be finite and >= 0");
    }
    const Matrix x0 = embed(tokens, config, weights);
    const HiddenTrace clean = forward_from_embedding(x0, config, weights);
    const Eigen::Index last = x0.rows() - 1;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::vector<PerturbationResult> out;
    for (double scale : scales) {
        Matrix noisy = x0;
        for (Eigen::Index j = 0; j < noisy.cols(); ++j) noisy(last, j) += scale * normal(rng);
        const HiddenTrace pert = forward_from_embedding(noisy, config, weights);
        out.push_back({scale, cosine_similarity(pert.X[1].row(last).transpose(), clean.X[1].row(last).transpose()),
                       cosine_similarity(pert.X.back().row(last).transpose(), clean.X.back().row(last).transpose())});
    }
    return out;
}

std::vector<SingularValueRow> singular_value_profile(const JacobianMap& jacobians, int token,
                                                     const std::vector<int>& layers, Eigen::Index k) {
    std::vector<SingularValueRow> rows;
    for (int l : layers) {
        auto it = jacobians.find({l, token, token});
        if (it == jacobians.end()) {
            throw Error(ErrorCode::IncompleteInput, "missing Jacobian " + to_string(ConnectionId{l, token, token}));
        }
        const auto svd = jacobian_svd(it->second, k);
        for (Eigen::Index r = 0; r < k; ++r) rows.push_back({l, static_cast<int>(r) + 1, svd.s(r)});
    }
    return rows;
}

}  // namespace cprobe
