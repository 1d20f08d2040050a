#include "coupling_probe/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cprobe {

std::string to_string(CouplingKind kind) {
    switch (kind) {
        case CouplingKind::depthwise: return "depthwise";
        case CouplingKind::token_self: return "token_self";
        case CouplingKind::token_fixed_input: return "token_fixed_input";
        case CouplingKind::token_fixed_output: return "token_fixed_output";
        case CouplingKind::cross_B: return "cross_B";
    }
    return "depthwise";
}

namespace {

void check_shapes(const Matrix& probe, const TruncatedSVD& basis) {
    if (probe.rows() != basis.U.rows() || probe.cols() != basis.V.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "probe Jacobian and basis dimensions differ");
    }
}

double p_norm(const Vector& s, double p) {
    if (std::isinf(p)) return s.cwiseAbs().maxCoeff();
    if (p == 1.0) return s.cwiseAbs().sum();
    if (p == 2.0) return s.norm();
    return std::pow(s.cwiseAbs().array().pow(p).sum(), 1.0 / p);
}

void check_causal(const ConnectionId& id) {
    if (id.t_in > id.t_out) throw Error(ErrorCode::InvalidConnection, "causal-zero connection " + to_string(id));
}

CouplingRecord make_record(SpectralCache& cache, const ConnectionId& probe, const ConnectionId& basis, double p,
                           CouplingKind kind, bool cross) {
    check_causal(probe);
    check_causal(basis);
    CouplingRecord rec;
    rec.probe = probe;
    rec.basis = basis;
    rec.k = cache.k();
    rec.p = p;
    rec.kind = kind;
    const Matrix& J = cache.jacobian(probe).J;
    const TruncatedSVD& b = cache.svd(basis);
    rec.A = cross ? cross_coupling_matrix(J, b) : coupling_matrix(J, b);
    const TruncatedSVD& own = cache.svd(probe);
    if (own.degenerate()) {
        rec.degenerate = true;
        rec.m = rec.c = std::numeric_limits<double>::quiet_NaN();
        return rec;
    }
    const auto mc = miscoupling(rec.A, own.s, p);
    rec.m = mc.m;
    rec.c = mc.c;
    return rec;
}

}  // namespace

Matrix coupling_matrix(const Matrix& probe, const TruncatedSVD& basis) {
    check_shapes(probe, basis);
    return basis.U.transpose() * probe * basis.V;
}

Matrix cross_coupling_matrix(const Matrix& probe, const TruncatedSVD& basis) {
    check_shapes(probe, basis);
    return basis.V.transpose() * probe * basis.U;
}

Miscoupling miscoupling(const Matrix& a, const Vector& s, double p) {
    if (a.rows() != s.size() || a.cols() != s.size()) throw Error(ErrorCode::ShapeMismatch, "A is not K x K");
    if (!(p >= 1.0)) throw Error(ErrorCode::InvalidInput, "norm order p must be >= 1");
    const double denom = p_norm(s, p);
    if (!(denom > 0.0)) throw Error(ErrorCode::DegenerateSpectrum, "probe spectrum is zero");
    Matrix diff = a;
    diff.diagonal() -= s;
    const double m = diff.norm() / denom;
    return {m, 1.0 - m};
}

Eigen::Index default_k(int d_model) {
    return std::max<Eigen::Index>(1, std::lround(d_model / 10.0));
}

SpectralCache::SpectralCache(const JacobianMap& jacobians, Eigen::Index k) : jacobians_(jacobians), k_(k) {
    if (k < 1) throw Error(ErrorCode::InvalidK, "K must be >= 1");
}

const BlockJacobian& SpectralCache::jacobian(const ConnectionId& id) const {
    auto it = jacobians_.find(id);
    if (it == jacobians_.end()) throw Error(ErrorCode::IncompleteInput, "missing Jacobian " + to_string(id));
    return it->second;
}

const TruncatedSVD& SpectralCache::svd(const ConnectionId& id) {
    auto it = svds_.find(id);
    if (it != svds_.end()) return it->second;
    const auto& bj = jacobian(id);
    if (k_ > bj.J.rows()) throw Error(ErrorCode::InvalidK, "K exceeds d_model");
    return svds_.emplace(id, jacobian_svd(bj, k_)).first->second;
}

CouplingRecord couple(SpectralCache& cache, const ConnectionId& probe, const ConnectionId& basis, double p,
                      CouplingKind kind) {
    return make_record(cache, probe, basis, p, kind, false);
}

CouplingRecord cross_couple(SpectralCache& cache, const ConnectionId& probe, const ConnectionId& basis, double p) {
    return make_record(cache, probe, basis, p, CouplingKind::cross_B, true);
}

DepthwiseResult depthwise_coupling(SpectralCache& cache, int token, double p, std::vector<int> layers) {
    if (layers.empty()) {
        for (const auto& [id, bj] : cache.jacobians()) {
            if (id.t_in == token && id.t_out == token) layers.push_back(id.layer);
        }
    }
    std::vector<std::string> missing;
    for (int l : layers) {
        try {
            cache.jacobian({l, token, token});
        } catch (const Error&) {
            missing.push_back(to_string(ConnectionId{l, token, token}));
        }
    }
    if (layers.empty()) missing.push_back("no Jacobians for token " + std::to_string(token));
    if (!missing.empty()) {
        std::string msg = "missing Jacobians:";
        for (const auto& m : missing) msg += " " + m;
        throw Error(ErrorCode::IncompleteInput, msg);
    }

    DepthwiseResult out;
    for (int l : layers) {
        for (int lb : layers) {
            if (l == lb) continue;
            out.records.push_back(couple(cache, {l, token, token}, {lb, token, token}, p, CouplingKind::depthwise));
        }
    }
    out.mean_c = mean_coupling(out.records);
    return out;
}

std::vector<CouplingRecord> tokenwise_coupling(SpectralCache& cache, const TokenScheme& scheme, int layer,
                                               int basis_layer, Eigen::Index n_tokens, double p) {
    const int n = static_cast<int>(n_tokens);
    std::vector<std::pair<ConnectionId, ConnectionId>> pairs;
    CouplingKind kind = CouplingKind::token_self;

    if (std::holds_alternative<SelfScheme>(scheme)) {
        for (int t = 0; t < n; ++t)
            for (int tb = 0; tb < n; ++tb) pairs.push_back({{layer, t, t}, {basis_layer, tb, tb}});
    } else if (const auto* fi = std::get_if<FixedInputScheme>(&scheme)) {
        kind = CouplingKind::token_fixed_input;
        if (fi->t_in < 0 || fi->t_in >= n) throw Error(ErrorCode::InvalidConnection, "fixed input token out of range");
        for (int t2 = fi->t_in; t2 < n; ++t2)
            for (int t2b = fi->t_in; t2b < n; ++t2b) pairs.push_back({{layer, fi->t_in, t2}, {basis_layer, fi->t_in, t2b}});
    } else {
        kind = CouplingKind::token_fixed_output;
        const int t_out = std::get<FixedOutputScheme>(scheme).t_out;
        if (t_out < 0 || t_out >= n) throw Error(ErrorCode::InvalidConnection, "fixed output token out of range");
        for (int t1 = 0; t1 <= t_out; ++t1)
            for (int t1b = 0; t1b <= t_out; ++t1b) pairs.push_back({{layer, t1, t_out}, {basis_layer, t1b, t_out}});
    }

    std::vector<CouplingRecord> records;
    for (const auto& [probe, basis] : pairs) {
        if (probe == basis) continue;
        records.push_back(couple(cache, probe, basis, p, kind));
    }
    return records;
}

double mean_coupling(const std::vector<CouplingRecord>& records) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : records) {
        if (r.degenerate) continue;
        sum += r.c;
        ++count;
    }
    return count == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(count);
}

Matrix adjacency_summary(const std::vector<CouplingRecord>& records, int n_layers) {
    if (records.empty()) throw Error(ErrorCode::InsufficientData, "no coupling records");
    Matrix sum = Matrix::Zero(n_layers, n_layers);
    Matrix count = Matrix::Zero(n_layers, n_layers);
    for (const auto& r : records) {
        if (r.degenerate) continue;
        const int i = r.probe.layer - 1;
        const int j = r.basis.layer - 1;
        if (i < 0 || j < 0 || i >= n_layers || j >= n_layers) throw Error(ErrorCode::InvalidInput, "record layer out of range");
        sum(i, j) += r.c;
        count(i, j) += 1.0;
    }
    Matrix adj(n_layers, n_layers);
    for (int i = 0; i < n_layers; ++i) {
        for (int j = 0; j < n_layers; ++j) {
            if (i == j) {
                adj(i, j) = 1.0;
            } else {
                adj(i, j) = count(i, j) > 0 ? sum(i, j) / count(i, j) : std::numeric_limits<double>::quiet_NaN();
            }
        }
    }
    return adj;
}

}  // namespace cprobe
