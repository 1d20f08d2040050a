#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "coupling_probe/transformer.hpp"

namespace cprobe {

/// One block connection: block `layer` (1-based, maps X^{layer-1} to X^{layer}) from input
/// token `t_in` to output token `t_out` (0-based).
struct ConnectionId {
    int layer = 1;
    int t_in = 0;
    int t_out = 0;

    auto operator<=>(const ConnectionId&) const = default;
};

std::string to_string(const ConnectionId& id);

struct BlockJacobian {
    ConnectionId id;
    Matrix J;  // d_model x d_model, d f_{t_out} / d x_{t_in}
    std::string context;
};

struct JacobianOptions {
    /// For the last block, differentiate FinalLN(X + f) instead of f.
    bool include_final_ln = false;
    /// Also report t_out < t_in; those tangents are computed, not assumed zero.
    bool all_outputs = false;
};

/// Forward-mode Jacobians J^l_{t_in, t2} of the block update for every t2 >= t_in,
/// one dual-number pass per input coordinate, evaluated at X^{l-1} of `trace`.
std::vector<BlockJacobian> block_jacobian_row(const HiddenTrace& trace, int layer, int t_in, const ModelConfig& config,
                                              const ModelWeights& weights, const JacobianOptions& options = {});

/// Central-difference oracle for a single connection. Used by tests only.
Matrix fd_block_jacobian(const HiddenTrace& trace, int layer, int t_in, int t_out, double step,
                         const ModelConfig& config, const ModelWeights& weights, const JacobianOptions& options = {});

/// Central differences of an arbitrary row map `fn: Matrix(n x d) -> Matrix(n x d_out)`
/// around `x`, perturbing row `t_in` and reading row `t_out`.
template <typename Fn>
Matrix fd_jacobian(Fn&& fn, const Matrix& x, int t_in, int t_out, double step) {
    if (!(step > 0.0)) throw Error(ErrorCode::InvalidInput, "finite-difference step must be positive");
    Matrix jac;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        Matrix plus = x;
        Matrix minus = x;
        plus(t_in, j) += step;
        minus(t_in, j) -= step;
        const Matrix fp = fn(plus);
        const Matrix fm = fn(minus);
        if (jac.size() == 0) jac.resize(fp.cols(), x.cols());
        jac.col(j) = (fp.row(t_out) - fm.row(t_out)).transpose() / (2.0 * step);
    }
    return jac;
}

TruncatedSVD jacobian_svd(const BlockJacobian& jacobian, Eigen::Index k);

using JacobianMap = std::map<ConnectionId, BlockJacobian>;

/// Evaluates block_jacobian_row for each (layer, t_in) request, spread over `jobs`
/// worker threads. The result is keyed by connection and independent of `jobs`.
JacobianMap compute_jacobians(const HiddenTrace& trace, const std::vector<std::pair<int, int>>& layer_token_requests,
                              const ModelConfig& config, const ModelWeights& weights, int jobs = 1,
                              const JacobianOptions& options = {});

/// Writes every Jacobian to a tensor bundle with names "J_l{l}_t{t1}_{t2}".
void dump_jacobians(const JacobianMap& jacobians, const std::filesystem::path& manifest_path);

}  // namespace cprobe
